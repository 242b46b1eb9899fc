"""Command-line entry point: ``python3 -m pvhil {run,sweep,controller,check}``.

Exit codes: 0 success, 1 validation error, 2 runtime/transport error,
3 relay oracle disagreement.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import scenario as sc
from .netmodel import ConvergenceError, SingularNetworkError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_ORACLE = 0, 1, 2, 3

log = logging.getLogger("pvhil")


def _load(path: str | None) -> sc.ScenarioSpec:
    return sc.load_scenario(path) if path else sc.ScenarioSpec()


def cmd_run(args: argparse.Namespace) -> int:
    spec = _load(args.scenario)
    if args.split or args.listen:
        from dataclasses import replace

        spec = replace(spec, mode="split")
    if spec.mode == "split":
        result = sc.run_split(spec, args.listen or "127.0.0.1:0", spawn=not args.no_spawn)
    else:
        result = sc.run_scenario(spec)
    metrics = sc.compute_metrics(result, spec.relay)
    sc.write_outputs(result, metrics, args.out, spec)
    rocof = ", ".join(f"{p} {v:.3f}" for p, v in metrics.max_abs_rocof.items())
    print(f"{len(result)} steps; max |RoCoF| (Hz/s): {rocof}; relay tripped: {metrics.relay_tripped['end']}")
    return EXIT_OK


def _parse_values(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError as exc:
        raise sc.ScenarioError([f"--values: {exc}"]) from exc


def cmd_sweep(args: argparse.Namespace) -> int:
    sweep = sc.SweepSpec(_load(args.scenario), args.param, _parse_values(args.values))
    points = sc.run_sweep(sweep, workers=args.workers)
    sc.write_sweep(points, sweep, args.out)
    status = EXIT_OK
    for pt in points:
        if pt.ok:
            print(f"{sweep.param}={pt.value:g}: end-bus max |RoCoF| {pt.metrics.max_abs_rocof['end']:.4f} Hz/s, "
                  f"tripped {pt.metrics.relay_tripped['end']}")
        else:
            print(f"{sweep.param}={pt.value:g}: FAILED {pt.error}")
            code = EXIT_ORACLE if pt.error.startswith("OracleDisagreement") else EXIT_RUNTIME
            status = max(status, code)
    return status


def cmd_controller(args: argparse.Namespace) -> int:
    from .hilink import session

    spec = _load(args.scenario)
    link = session.LinkConfig(
        address=args.connect,
        role="controller",
        dt=spec.sim.dt,
        step_count=spec.sim.steps,
        digest=bytes.fromhex(sc.spec_digest(spec))[:8],
    )
    return session.controller_run(spec.resolved_inverter(), link, spec.p_avail)


def cmd_check(args: argparse.Namespace) -> int:
    files = sorted(Path(args.out).rglob(sc.CSV_NAME))
    if not files:
        print(f"no {sc.CSV_NAME} under {args.out}", file=sys.stderr)
        return EXIT_INVALID
    status = EXIT_OK
    for f in files:
        rep = sc.check_csv(f)
        print(f"{'ok  ' if rep.agree else 'FAIL'} {f}: {rep.message}")
        if not rep.agree:
            status = EXIT_ORACLE
    return status


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pvhil", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one scenario and write its output files")
    p.add_argument("--scenario", help="scenario JSON (default: Case Study 1 at 100%% PV)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--split", action="store_true", help="run the controller as a separate process")
    p.add_argument("--listen", help="plant address for split mode (host:port or unix:/path)")
    p.add_argument("--no-spawn", action="store_true", help="wait for an external controller instead of spawning one")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run one scenario per value of a parameter")
    p.add_argument("--scenario")
    p.add_argument("--param", required=True, choices=sc.SWEEPABLE)
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("controller", help="split-mode controller peer")
    p.add_argument("--connect", required=True, help="plant address")
    p.add_argument("--scenario")
    p.set_defaults(func=cmd_controller)

    p = sub.add_parser("check", help="re-run the brute-force relay scan on saved CSVs")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_check)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    from .hilink.session import TransportError

    try:
        return args.func(args)
    except sc.ScenarioError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except sc.OracleDisagreement as exc:
        print(f"oracle disagreement: {exc}", file=sys.stderr)
        return EXIT_ORACLE
    except (TransportError, ConvergenceError, SingularNetworkError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
