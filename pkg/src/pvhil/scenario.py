"""Case-study scenarios: JSON specs, single runs, sweeps, metrics and output files.

A scenario file is a JSON object; every key is optional and the defaults give
Case Study 1 (60% symmetrical dip for 300 ms) at 100% PV::

    {
      "feeder": "cyprus_synthetic.json",
      "sim": {"dt": 0.001, "duration": 2.0},
      "events": {"dip_start": 0.0, "dip_clear": 0.3, "dip_residual": 0.4},
      "pv_generation_fraction": 1.0,
      "load_scale": 1.0,
      "line_length_factor": 1.0,
      "relay": {"threshold_hz_per_s": 1.7, "duration_s": 0.6},
      "rocof_window_s": 0.1,
      "inverter": {"s_rated": 0.15, "i_max": 1.1, "v_enter": 0.9, "v_exit": 0.9,
                   "exit_hold": 0.02, "k_q": 2.5, "p_ramp": null},
      "swing": {"h": 4.0, "d": 20.0, "f_n": 50.0, "s_sys": 20.0},
      "mode": "in_process"
    }

``"events": null`` runs without a disturbance. ``p_ramp: null`` means the
recovery ramp restores the pre-fault power in ``RECOVERY_TIME`` seconds.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import subprocess
import sys
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

from .dynamics import (
    POSITIONS,
    EventSchedule,
    RunResult,
    SimConfig,
    SwingParams,
    World,
    init_world,
    run_world,
)
from .netmodel import DEFAULT_FEEDER, FeederError, load_feeder, scale_line_length
from .protection import RelaySettings, scan_trip
from .pvplant import (
    RECOVERY_TIME,
    InverterMode,
    InverterParams,
    ModuleParams,
    OperatingEnv,
    irradiance_for_fraction,
    mpp_power,
)

MODES = ("in_process", "split")
SWEEPABLE = ("pv_generation_fraction", "load_scale", "line_length_factor")
FEEDER_DIR = DEFAULT_FEEDER.parent


class ScenarioError(ValueError):
    """Invalid scenario; ``errors`` lists every problem found."""

    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("invalid scenario:\n  " + "\n  ".join(self.errors))


class OracleDisagreement(RuntimeError):
    """Online relay and brute-force scan reached different decisions."""


@dataclass(frozen=True)
class ScenarioSpec:
    feeder: Path = DEFAULT_FEEDER
    sim: SimConfig = SimConfig()
    events: EventSchedule | None = EventSchedule()
    pv_generation_fraction: float = 1.0
    load_scale: float = 1.0
    line_length_factor: float = 1.0
    relay: RelaySettings = RelaySettings()
    rocof_window: float = 0.1
    inverter: InverterParams = InverterParams()
    p_ramp: float | None = None  # overrides inverter.p_ramp when set
    swing: SwingParams = SwingParams()
    mode: str = "in_process"

    def __post_init__(self) -> None:
        errors = _bound_errors(self)
        if errors:
            raise ScenarioError(errors)

    @property
    def p_avail(self) -> float:
        """Available PV power (pu) at the scenario's generation fraction."""
        module = ModuleParams(p_stc=self.inverter.s_rated)
        return mpp_power(module, OperatingEnv(irradiance=irradiance_for_fraction(self.pv_generation_fraction)))

    def resolved_inverter(self) -> InverterParams:
        if self.p_ramp is not None:
            return replace(self.inverter, p_ramp=self.p_ramp)
        p0 = min(self.p_avail, self.inverter.s_rated)
        if p0 <= 0:
            p0 = self.inverter.s_rated
        return replace(self.inverter, p_ramp=p0 / RECOVERY_TIME)


def _bound_errors(spec: ScenarioSpec) -> list[str]:
    errors = []
    if not 0 <= spec.pv_generation_fraction <= 1:
        errors.append(f"pv_generation_fraction: {spec.pv_generation_fraction} not in [0, 1]")
    if not spec.load_scale >= 0:
        errors.append(f"load_scale: {spec.load_scale} must be >= 0")
    if not spec.line_length_factor > 0:
        errors.append(f"line_length_factor: {spec.line_length_factor} must be > 0")
    if not spec.rocof_window >= 2 * spec.sim.dt:
        errors.append("rocof_window_s: must span at least two steps")
    if spec.p_ramp is not None and not spec.p_ramp > 0:
        errors.append("inverter.p_ramp: must be positive")
    if spec.mode not in MODES:
        errors.append(f"mode: {spec.mode!r} not one of {MODES}")
    if not Path(spec.feeder).is_file():
        errors.append(f"feeder: file {str(spec.feeder)!r} does not exist")
    return errors


# -- parsing -------------------------------------------------------------

_SECTIONS = {
    "sim": (SimConfig, {"dt": "dt", "duration": "duration"}),
    "events": (EventSchedule, {"dip_start": "dip_start", "dip_clear": "dip_clear", "dip_residual": "dip_residual"}),
    "relay": (RelaySettings, {"threshold_hz_per_s": "threshold", "duration_s": "duration"}),
    "swing": (SwingParams, {"h": "h", "d": "d", "f_n": "f_n", "s_sys": "s_sys"}),
    "inverter": (
        InverterParams,
        {k: k for k in ("s_rated", "i_max", "v_enter", "v_exit", "exit_hold", "k_q", "p_ramp")},
    ),
}
_SCALARS = {
    "pv_generation_fraction": "pv_generation_fraction",
    "load_scale": "load_scale",
    "line_length_factor": "line_length_factor",
    "rocof_window_s": "rocof_window",
}
_TOP_KEYS = {"feeder", "mode", *_SECTIONS, *_SCALARS}


def _is_number(x: Any) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def resolve_feeder(name: str, base_dir: Path | None) -> Path | None:
    """Find a feeder file: absolute, next to the scenario, cwd, then the bundled feeders."""
    p = Path(name)
    if p.is_absolute():
        return p if p.is_file() else None
    candidates = []
    if base_dir is not None:
        candidates.append(base_dir / p)
    candidates += [Path.cwd() / p, FEEDER_DIR / p, FEEDER_DIR / p.name]
    for c in candidates:
        if c.is_file():
            return c.resolve()
    return None


def _parse_section(name: str, raw: Any, defaults: Any, errors: list[str]) -> Any:
    cls, keymap = _SECTIONS[name]
    if not isinstance(raw, dict):
        errors.append(f"{name}: expected an object")
        return defaults
    kwargs = {}
    for key, value in raw.items():
        attr = keymap.get(key)
        if attr is None:
            errors.append(f"{name}.{key}: unknown key")
        elif name == "inverter" and key == "p_ramp" and value is None:
            continue
        elif not _is_number(value):
            errors.append(f"{name}.{key}: expected a finite number, got {value!r}")
        else:
            kwargs[attr] = float(value)
    if name == "inverter":
        kwargs.pop("p_ramp", None)  # carried by ScenarioSpec.p_ramp
    try:
        return replace(defaults, **kwargs)
    except ValueError as exc:
        errors.append(f"{name}: {exc}")
        return defaults


def scenario_from_dict(raw: Any, base_dir: Path | None = None) -> ScenarioSpec:
    if not isinstance(raw, dict):
        raise ScenarioError(["top level: expected a JSON object"])
    errors: list[str] = []
    base = ScenarioSpec()
    kw: dict[str, Any] = {}
    for key in raw:
        if key not in _TOP_KEYS:
            errors.append(f"{key}: unknown key")

    if "feeder" in raw:
        name = raw["feeder"]
        if not isinstance(name, str):
            errors.append("feeder: expected a path string")
        else:
            path = resolve_feeder(name, base_dir)
            if path is None:
                errors.append(f"feeder: file {name!r} not found")
            else:
                kw["feeder"] = path
    for section, default in (
        ("sim", base.sim),
        ("relay", base.relay),
        ("swing", base.swing),
        ("inverter", base.inverter),
    ):
        if section in raw:
            kw[section] = _parse_section(section, raw[section], default, errors)
    if "events" in raw:
        kw["events"] = None if raw["events"] is None else _parse_section("events", raw["events"], base.events, errors)
    inv = raw.get("inverter")
    if isinstance(inv, dict) and _is_number(inv.get("p_ramp")):
        kw["p_ramp"] = float(inv["p_ramp"])
    for key, attr in _SCALARS.items():
        if key in raw:
            if _is_number(raw[key]):
                kw[attr] = float(raw[key])
            else:
                errors.append(f"{key}: expected a finite number, got {raw[key]!r}")
    if "mode" in raw:
        kw["mode"] = raw["mode"]

    candidate = ScenarioSpec.__new__(ScenarioSpec)
    for f in fields(ScenarioSpec):
        object.__setattr__(candidate, f.name, kw.get(f.name, getattr(base, f.name)))
    errors += _bound_errors(candidate)
    if errors:
        raise ScenarioError(errors)
    return ScenarioSpec(**kw)


def load_scenario(path: str | Path) -> ScenarioSpec:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError([f"{path}: cannot read ({exc.strerror})"]) from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError([f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}"]) from exc
    return scenario_from_dict(raw, base_dir=path.parent)


def spec_to_dict(spec: ScenarioSpec) -> dict[str, Any]:
    """Resolved spec in the scenario-file format (defaults and p_ramp filled in)."""
    inv = spec.resolved_inverter()
    out: dict[str, Any] = {"feeder": str(spec.feeder)}
    for name, (cls, keymap) in _SECTIONS.items():
        obj = {"sim": spec.sim, "events": spec.events, "relay": spec.relay, "swing": spec.swing, "inverter": inv}[name]
        out[name] = None if obj is None else {key: getattr(obj, attr) for key, attr in keymap.items()}
    for key, attr in _SCALARS.items():
        out[key] = getattr(spec, attr)
    out["mode"] = spec.mode
    return out


def spec_digest(spec: ScenarioSpec) -> str:
    """sha256 of the canonical resolved spec; the feeder enters by content, mode is excluded."""
    d = spec_to_dict(spec)
    d.pop("mode")
    d["feeder"] = hashlib.sha256(Path(spec.feeder).read_bytes()).hexdigest()
    canonical = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# -- running -------------------------------------------------------------


def build_world(spec: ScenarioSpec, in_process: bool = True) -> World:
    try:
        model = load_feeder(spec.feeder)
    except (OSError, json.JSONDecodeError, FeederError) as exc:
        raise ScenarioError([f"feeder: {exc}"]) from exc
    if spec.line_length_factor != 1.0:
        model = scale_line_length(model, spec.line_length_factor)
    world = init_world(
        model,
        spec.p_avail,
        spec.load_scale,
        swing_params=spec.swing,
        schedule=spec.events,
        sim=spec.sim,
        inverter=spec.resolved_inverter(),
        relay_settings=spec.relay,
        rocof_window=spec.rocof_window,
        in_process=in_process,
    )
    world.result.spec_digest = spec_digest(spec)
    return world


def run_scenario(spec: ScenarioSpec, listen: str | None = None) -> RunResult:
    if spec.mode == "split":
        return run_split(spec, listen or "127.0.0.1:0")
    return run_world(build_world(spec))


def run_split(spec: ScenarioSpec, listen_addr: str = "127.0.0.1:0", spawn: bool = True) -> RunResult:
    """Serve the plant and (optionally) spawn ``pvhil controller`` as the peer process."""
    from .hilink import session

    world = build_world(spec, in_process=False)
    link = session.plant_link(
        listen_addr, spec.sim.dt, spec.sim.steps, bytes.fromhex(world.result.spec_digest)[:8]
    )
    srv = session.listen(listen_addr)
    proc = None
    try:
        address = session.format_address(srv.family, srv.getsockname())
        with tempfile.TemporaryDirectory(prefix="pvhil-") as tmp:
            if spawn:
                spec_file = Path(tmp) / "scenario.json"
                spec_file.write_text(json.dumps(spec_to_dict(spec), indent=2), encoding="utf-8")
                cmd = [sys.executable, "-m", "pvhil", "controller", "--connect", address, "--scenario", str(spec_file)]
                proc = subprocess.Popen(cmd)
            srv.settimeout(link.timeout)
            try:
                conn, _ = srv.accept()
            except OSError as exc:
                raise session.TransportError(f"no controller connected to {address}: {exc}") from exc
            chan = session.Channel(conn, timeout=link.timeout)
            try:
                result = session.plant_serve(world, link, chan)
            finally:
                chan.close()
            if proc is not None:
                status = proc.wait(timeout=link.timeout)
                proc = None
                if status != 0 and result.valid:
                    raise session.TransportError(f"controller exited with status {status}")
    finally:
        srv.close()
        if proc is not None:
            proc.kill()
            proc.wait()
        if srv.family == session.socket.AF_UNIX:
            Path(session.parse_address(listen_addr)[1]).unlink(missing_ok=True)
    if not result.valid:
        raise session.TransportError(result.error or "split run aborted")
    return result


# -- metrics -------------------------------------------------------------


@dataclass
class MetricsSummary:
    max_abs_rocof: dict[str, float]
    relay_tripped: dict[str, bool]
    trip_time: dict[str, float | None]
    voltage_nadir: dict[str, float]
    recovery_time: float | None  # first return to Normal after leaving it
    final_delta_f: float
    final_mode: int
    steps: int
    spec_digest: str = ""
    valid: bool = True


def compute_metrics(r: RunResult, settings: RelaySettings) -> MetricsSummary:
    """Summarize a run; the online relay is re-checked by the brute-force scan."""
    max_rocof, tripped, trip_time, nadir = {}, {}, {}, {}
    for p in POSITIONS:
        rocof = r.rocof[p]
        max_rocof[p] = max((abs(x) for x in rocof), default=0.0)
        nadir[p] = min(r.v[p], default=math.nan)
        online = bool(r.relay[p] and r.relay[p][-1])
        online_time = r.relay_trip_time[p] if online else None
        scan, scan_time = scan_trip(rocof, r.dt, settings, times=r.t)
        if scan != online or scan_time != online_time:
            raise OracleDisagreement(
                f"{p} bus: online relay says {online} at {online_time}, scan says {scan} at {scan_time}"
            )
        tripped[p] = online
        trip_time[p] = online_time
    recovery = None
    left = False
    for t, m in zip(r.t, r.pv_mode):
        if m != InverterMode.NORMAL:
            left = True
        elif left:
            recovery = t
            break
    return MetricsSummary(
        max_abs_rocof=max_rocof,
        relay_tripped=tripped,
        trip_time=trip_time,
        voltage_nadir=nadir,
        recovery_time=recovery,
        final_delta_f=r.delta_f[-1] if r.delta_f else 0.0,
        final_mode=r.pv_mode[-1] if r.pv_mode else int(InverterMode.NORMAL),
        steps=len(r),
        spec_digest=r.spec_digest,
        valid=r.valid,
    )


# -- outputs -------------------------------------------------------------

CSV_NAME = "timeseries.csv"
SUMMARY_NAME = "summary.json"
ECHO_NAME = "spec.echo.json"


def csv_header() -> list[str]:
    cols = ["t_s"]
    for p in POSITIONS:
        cols += [f"{p}_v_pu", f"{p}_f_hz", f"{p}_rocof_hzps"]
    return cols + ["pv_p_pu", "pv_q_pu", "pv_mode", "relay_tripped"]


def timeseries_csv(r: RunResult) -> str:
    buf = io.StringIO(newline="")
    w = csv.writer(buf)  # RFC 4180: CRLF, minimal quoting
    w.writerow(csv_header())
    for k, t in enumerate(r.t):
        row = [repr(t)]
        for p in POSITIONS:
            row += [repr(r.v[p][k]), repr(r.f[p][k]), repr(r.rocof[p][k])]
        row += [repr(r.pv_p[k]), repr(r.pv_q[k]), str(r.pv_mode[k]), str(int(r.relay_tripped[k]))]
        w.writerow(row)
    return buf.getvalue()


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def write_outputs(r: RunResult, m: MetricsSummary, out_dir: str | Path, spec: ScenarioSpec | None = None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / CSV_NAME, out / SUMMARY_NAME]
    _atomic_write(written[0], timeseries_csv(r))
    _atomic_write(written[1], json.dumps(asdict(m), indent=2, sort_keys=True) + "\n")
    if spec is not None:
        written.append(out / ECHO_NAME)
        _atomic_write(written[2], json.dumps(spec_to_dict(spec), indent=2) + "\n")
    return written


# -- sweeps --------------------------------------------------------------


@dataclass(frozen=True)
class SweepSpec:
    base: ScenarioSpec
    param: str
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        if self.param not in SWEEPABLE:
            raise ScenarioError([f"sweep param {self.param!r} not one of {SWEEPABLE}"])
        if not self.values:
            raise ScenarioError(["sweep needs at least one value"])


@dataclass
class SweepPoint:
    value: float
    result: RunResult | None = None
    metrics: MetricsSummary | None = None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None


def _sweep_member(base: ScenarioSpec, param: str, value: float) -> SweepPoint:
    try:
        spec = replace(base, **{param: value})
        result = run_scenario(spec)
        return SweepPoint(value, result, compute_metrics(result, spec.relay))
    except Exception as exc:  # reported per value, the sweep carries on
        return SweepPoint(value, error=f"{type(exc).__name__}: {exc}")


def run_sweep(sweep: SweepSpec, workers: int = 1) -> list[SweepPoint]:
    """One independent run per value, returned in input order."""
    args = [(sweep.base, sweep.param, v) for v in sweep.values]
    if workers <= 1:
        return [_sweep_member(*a) for a in args]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_sweep_member, *zip(*args)))


def member_dirname(param: str, value: float) -> str:
    return f"{param}={value!r}"


def write_sweep(points: Iterable[SweepPoint], sweep: SweepSpec, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for pt in points:
        entry: dict[str, Any] = {"value": pt.value, "dir": member_dirname(sweep.param, pt.value), "error": pt.error}
        if pt.ok:
            spec = replace(sweep.base, **{sweep.param: pt.value})
            write_outputs(pt.result, pt.metrics, out / entry["dir"], spec)
            entry["max_abs_rocof"] = pt.metrics.max_abs_rocof
            entry["relay_tripped"] = pt.metrics.relay_tripped
        index.append(entry)
    path = out / "sweep.json"
    _atomic_write(path, json.dumps({"param": sweep.param, "points": index}, indent=2) + "\n")
    return path


def relative_spread(xs: Sequence[float]) -> float:
    """(max - min) / mean."""
    mean = sum(xs) / len(xs)
    return (max(xs) - min(xs)) / mean if mean else 0.0


# -- offline check ---------------------------------------------------------


@dataclass
class CheckReport:
    path: Path
    agree: bool
    message: str = field(default="")


def check_csv(path: str | Path, settings: RelaySettings | None = None, dt: float | None = None) -> CheckReport:
    """Re-run the brute-force relay scan on a saved ``timeseries.csv``."""
    path = Path(path)
    echo = path.parent / ECHO_NAME
    if settings is None or dt is None:
        spec_settings, spec_dt = RelaySettings(), None
        if echo.is_file():
            raw = json.loads(echo.read_text(encoding="utf-8"))
            relay = raw.get("relay") or {}
            spec_settings = RelaySettings(
                threshold=relay.get("threshold_hz_per_s", 1.7), duration=relay.get("duration_s", 0.6)
            )
            spec_dt = (raw.get("sim") or {}).get("dt")
        settings = settings or spec_settings
        dt = dt or spec_dt
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    times = [float(r["t_s"]) for r in rows]
    rocof = [float(r["end_rocof_hzps"]) for r in rows]
    flags = [r["relay_tripped"] == "1" for r in rows]
    if dt is None:
        dt = times[1] - times[0] if len(times) > 1 else 1e-3
    scan, scan_time = scan_trip(rocof, dt, settings, times=times)
    first = next((t for t, fl in zip(times, flags) if fl), None)
    latched = all(flags[flags.index(True) :]) if True in flags else True
    if not latched:
        return CheckReport(path, False, "relay_tripped column is not latched")
    if scan != (first is not None) or scan_time != first:
        return CheckReport(path, False, f"trace says trip at {first}, scan says {scan} at {scan_time}")
    return CheckReport(path, True, f"{'trip at ' + repr(first) if scan else 'no trip'}")
