import json
from dataclasses import replace
from pathlib import Path

import pytest

from pvhil import scenario as sc
from pvhil.dynamics import RunResult, SimConfig
from pvhil.protection import RelaySettings, RelayState, relay_step

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "scenarios"


def write(tmp_path, obj, name="s.json"):
    p = tmp_path / name
    p.write_text(obj if isinstance(obj, str) else json.dumps(obj))
    return p


def test_empty_file_gives_defaults(tmp_path):
    spec = sc.load_scenario(write(tmp_path, {}))
    assert spec == sc.ScenarioSpec()
    assert spec.pv_generation_fraction == 1.0
    assert spec.events.dip_residual == 0.4 and spec.events.dip_clear == 0.3
    assert spec.relay == RelaySettings(1.7, 0.6)


def test_out_of_bounds_pv(tmp_path):
    with pytest.raises(sc.ScenarioError, match="pv_generation_fraction"):
        sc.load_scenario(write(tmp_path, {"pv_generation_fraction": 1.4}))


def test_errors_listed_exhaustively(tmp_path):
    raw = {
        "pv_generation_fraction": 1.4,
        "load_scale": -1,
        "colour": "blue",
        "relay": {"threshold_hz_per_s": "high"},
        "sim": {"dt": 0.001, "duration": 0.5},
        "feeder": "nowhere.json",
    }
    with pytest.raises(sc.ScenarioError) as info:
        sc.load_scenario(write(tmp_path, raw))
    errs = info.value.errors
    assert len(errs) == 6
    for key in ("pv_generation_fraction", "load_scale", "colour", "relay.threshold_hz_per_s", "sim", "feeder"):
        assert any(e.startswith(key) for e in errs), key


def test_parse_error_has_position(tmp_path):
    with pytest.raises(sc.ScenarioError, match=r":3:\d+:"):
        sc.load_scenario(write(tmp_path, '{\n  "load_scale": 1,\n  "mode": }\n'))


def test_case_two_file_echoes_load():
    spec = sc.load_scenario(SCENARIOS / "case2_load25.json")
    assert spec.load_scale == 0.25
    assert sc.spec_to_dict(spec)["load_scale"] == 0.25


def test_shipped_scenarios_load():
    for p in SCENARIOS.glob("*.json"):
        sc.load_scenario(p)


def test_null_events_and_p_ramp(tmp_path):
    spec = sc.load_scenario(write(tmp_path, {"events": None, "inverter": {"p_ramp": 0.3}}))
    assert spec.events is None
    assert spec.resolved_inverter().p_ramp == 0.3


def test_default_ramp_restores_prefault_in_280ms():
    spec = replace(sc.ScenarioSpec(), pv_generation_fraction=0.5)
    assert spec.resolved_inverter().p_ramp * 0.28 == pytest.approx(0.075)


def test_echo_roundtrip_keeps_digest(tmp_path):
    spec = sc.load_scenario(SCENARIOS / "case3_length10.json")
    echo = write(tmp_path, sc.spec_to_dict(spec), "echo.json")
    again = sc.load_scenario(echo)
    assert sc.spec_digest(again) == sc.spec_digest(spec)
    assert sc.spec_digest(replace(spec, mode="split")) == sc.spec_digest(spec)
    assert sc.spec_digest(replace(spec, load_scale=0.5)) != sc.spec_digest(spec)


def test_grid_arithmetic():
    r = sc.run_scenario(sc.ScenarioSpec())
    assert len(r) == 2000
    assert r.t[-1] == pytest.approx(1.999)


@pytest.fixture(scope="module")
def case1_full():
    spec = sc.ScenarioSpec()
    r = sc.run_scenario(spec)
    return spec, r, sc.compute_metrics(r, spec.relay)


def test_case1_metrics(case1_full):
    spec, r, m = case1_full
    assert not any(m.relay_tripped.values())
    assert m.recovery_time >= spec.events.dip_clear
    assert all(v >= 0 for v in m.max_abs_rocof.values())
    assert m.voltage_nadir["end"] < 0.5
    assert abs(m.final_delta_f) < 0.02 and m.final_mode == 0


def test_steady_run_metrics():
    spec = replace(sc.ScenarioSpec(), events=None, sim=SimConfig(duration=1.0))
    m = sc.compute_metrics(sc.run_scenario(spec), spec.relay)
    assert m.max_abs_rocof == {"start": 0.0, "middle": 0.0, "end": 0.0}
    assert not any(m.relay_tripped.values()) and m.recovery_time is None


def synthetic_result(trace, dt=1e-3, settings=RelaySettings()):
    r = RunResult(dt=dt, bus_names={"start": "a", "middle": "b", "end": "c"})
    rs = RelayState()
    for k, x in enumerate(trace):
        t = k * dt
        rs = relay_step(rs, x, dt, settings, t=t)
        r.t.append(t)
        for p in ("start", "middle", "end"):
            r.v[p].append(1.0)
            r.f[p].append(50.0)
            r.rocof[p].append(x)
            r.relay[p].append(rs.tripped)
            r.relay_trip_time[p] = rs.trip_time
        r.pv_p.append(0.0)
        r.pv_q.append(0.0)
        r.pv_mode.append(0)
        r.delta_f.append(0.0)
    return r


def test_injected_trace_trips_both_paths():
    trace = [0.0] * 100 + [1.8] * 700 + [0.0] * 200
    m = sc.compute_metrics(synthetic_result(trace), RelaySettings())
    assert m.relay_tripped["end"]
    assert m.trip_time["end"] == pytest.approx(0.699)


def test_disagreement_detected():
    r = synthetic_result([1.8] * 700)
    r.relay["end"] = [False] * 700
    with pytest.raises(sc.OracleDisagreement):
        sc.compute_metrics(r, RelaySettings())


def test_case3_cross_bus_spread():
    def spread(factor):
        spec = replace(sc.ScenarioSpec(), line_length_factor=factor)
        m = sc.compute_metrics(sc.run_scenario(spec), spec.relay).max_abs_rocof
        return max(m.values()) - min(m.values())

    assert spread(10.0) > spread(1.0)


def test_outputs(tmp_path, case1_full):
    spec, r, m = case1_full
    files = sc.write_outputs(r, m, tmp_path / "a", spec)
    assert [f.name for f in files] == ["timeseries.csv", "summary.json", "spec.echo.json"]
    raw = (tmp_path / "a" / "timeseries.csv").read_bytes()
    lines = raw.split(b"\r\n")
    assert lines[-1] == b"" and len(lines) - 1 == 2001
    assert lines[0].decode().split(",") == sc.csv_header()
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["max_abs_rocof"]["end"] == m.max_abs_rocof["end"]
    assert sorted(p.name for p in (tmp_path / "a").iterdir()) == sorted(f.name for f in files)


def test_outputs_are_deterministic(tmp_path):
    spec = sc.ScenarioSpec()
    for d in ("x", "y"):
        r = sc.run_scenario(spec)
        sc.write_outputs(r, sc.compute_metrics(r, spec.relay), tmp_path / d, spec)
    for name in ("timeseries.csv", "summary.json", "spec.echo.json"):
        assert (tmp_path / "x" / name).read_bytes() == (tmp_path / "y" / name).read_bytes()


def test_failed_write_leaves_nothing(tmp_path, monkeypatch, case1_full):
    spec, r, m = case1_full

    def boom(src, dst):
        raise OSError("disk full")

    monkeypatch.setattr(sc.os, "replace", boom)
    with pytest.raises(OSError):
        sc.write_outputs(r, m, tmp_path, spec)
    assert list(tmp_path.iterdir()) == []


def test_sweep_orders_and_isolates_failures():
    sweep = sc.SweepSpec(sc.ScenarioSpec(), "pv_generation_fraction", (0.5, 1.4, 0.1))
    pts = sc.run_sweep(sweep)
    assert [p.value for p in pts] == [0.5, 1.4, 0.1]
    assert pts[0].ok and pts[2].ok
    assert not pts[1].ok and "pv_generation_fraction" in pts[1].error


def test_parallel_sweep_matches_serial():
    sweep = sc.SweepSpec(sc.ScenarioSpec(), "load_scale", (0.0, 1.0))
    serial = sc.run_sweep(sweep)
    parallel = sc.run_sweep(sweep, workers=2)
    for a, b in zip(serial, parallel):
        assert a.result == b.result and a.metrics == b.metrics


def test_sweep_param_restricted():
    with pytest.raises(sc.ScenarioError):
        sc.SweepSpec(sc.ScenarioSpec(), "dt", (1e-3,))


def test_write_sweep_and_check(tmp_path):
    sweep = sc.SweepSpec(sc.ScenarioSpec(), "line_length_factor", (0.5, 5.0))
    sc.write_sweep(sc.run_sweep(sweep), sweep, tmp_path)
    index = json.loads((tmp_path / "sweep.json").read_text())
    assert [p["value"] for p in index["points"]] == [0.5, 5.0]
    for p in index["points"]:
        rep = sc.check_csv(tmp_path / p["dir"] / "timeseries.csv")
        assert rep.agree, rep.message


def test_check_detects_tampering(tmp_path, case1_full):
    spec, r, m = case1_full
    sc.write_outputs(r, m, tmp_path, spec)
    csv_path = tmp_path / "timeseries.csv"
    raw = csv_path.read_bytes()
    assert raw.endswith(b",0\r\n")
    # flip the relay flag on the last row
    csv_path.write_bytes(raw[:-3] + b"1\r\n")
    assert not sc.check_csv(csv_path).agree


def test_relative_spread():
    assert sc.relative_spread([1.0, 1.0]) == 0.0
    assert sc.relative_spread([1.0, 3.0]) == pytest.approx(1.0)


DEFAULT_SWEEPS = [
    ("pv_generation_fraction", (0.10, 0.25, 0.50, 0.75, 1.00)),
    ("load_scale", (0.0, 0.10, 0.25, 0.50, 1.00)),
    ("line_length_factor", (0.5, 1.0, 5.0, 10.0)),
]


@pytest.mark.parametrize("param, values", DEFAULT_SWEEPS)
def test_default_sweeps_are_stable(param, values):
    for pt in sc.run_sweep(sc.SweepSpec(sc.ScenarioSpec(), param, values)):
        assert pt.ok, pt.error
        m = pt.metrics
        assert not any(m.relay_tripped.values())
        assert abs(m.final_delta_f) < 0.02
        assert m.final_mode == 0 and m.recovery_time is not None
