"""Command-line entry point: ``mshw <subcommand> ...`` or ``python -m mshw``.

Exit codes: 0 success, 1 configuration error, 2 failed check, 3 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import des_engine, harness, limits, ode_maps
from .config import ConfigError, load_json, load_scenario, phase_type_from_dict, scenario_from_dict
from .phase_type import PhaseTypeError

EXIT_OK, EXIT_CONFIG, EXIT_CHECK, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("mshw")


def _cmd_validate_ph(args) -> int:
    data = load_json(args.config)
    ph = scenario_from_dict(data).ph if "ph" in data else phase_type_from_dict(data)
    out = {
        "K": ph.K,
        "mean": ph.m,
        "mu": ph.mu,
        "scv": ph.scv,
        "gamma": ph.gamma.tolist(),
        "R": ph.R.tolist(),
    }
    print(json.dumps(out, indent=2))
    return EXIT_OK


def _cmd_simulate(args) -> int:
    sc = load_scenario(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    failures = 0
    for rep in range(args.reps):
        path = des_engine.run(
            sc, args.n, args.horizon, args.grid_dt, args.seed, rep,
            discipline=args.discipline, initial=args.initial, margin=args.margin,
        )
        bad = des_engine.check_invariants(path)
        if bad:
            log.error("replication %d violates: %s", rep, "; ".join(bad))
            failures += 1
        path.to_csv(out / f"path_{rep}.csv")
        if args.event_log:
            des_engine.write_event_log(path, out / f"events_{rep}.txt")
    log.info("wrote %d replication(s) to %s", args.reps, out)
    return EXIT_CHECK if failures else EXIT_OK


def _cmd_limit(args) -> int:
    sc = load_scenario(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = limits.diffusion_path(sc, args.seed, dt=args.dt, horizon=args.horizon, reps=args.reps)
    for rep in range(args.reps):
        path.to_csv(out / f"path_{rep}.csv", rep)
    log.info("wrote %d limit path(s) to %s", args.reps, out)
    return EXIT_OK


def _cmd_map_solve(args) -> int:
    y = ode_maps.GridPath.from_csv(args.path)
    if args.config:
        sc = load_scenario(args.config)
        coeff = ode_maps.MapCoefficients.for_phase_type(args.variant, sc.alpha, sc.ph)
    else:
        K = y.K
        p = np.asarray(args.p if args.p else [1.0 / K] * K)
        R = np.diag(args.nu if args.nu else [1.0] * K)
        build = ode_maps.MapCoefficients.phi if args.variant == ode_maps.PHI else ode_maps.MapCoefficients.psi
        coeff = build(args.alpha, p, R)
    sol = ode_maps.picard_solve(coeff, y, tol=args.tol, max_iter=args.max_iter, quadrature=args.quadrature)
    sol.to_csv(args.out)
    return EXIT_OK


def _cmd_experiment(args) -> int:
    plan = harness.load_plan(args.plan)
    report = harness.run_experiment(plan)
    report.write(args.out_dir)
    for name, ok in sorted(report.checks.items()):
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    return EXIT_OK if report.passed else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mshw", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate-ph", help="validate a phase-type law and print its derived quantities")
    p.add_argument("config", help="scenario JSON or a bare {p, nu, P} object")
    p.set_defaults(func=_cmd_validate_ph)

    p = sub.add_parser("simulate", help="simulate replications and write path CSVs")
    p.add_argument("config")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--horizon", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--grid-dt", type=float, default=0.01)
    p.add_argument("--discipline", choices=des_engine.DISCIPLINES, default=des_engine.ORIGINAL)
    p.add_argument("--initial", choices=des_engine.INITIALS, default=des_engine.EMPTY)
    p.add_argument("--margin", type=float, default=5.0, help="extra simulated time for the virtual wait")
    p.add_argument("--event-log", action="store_true", help="also write events_<rep>.txt")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("limit", help="sample diffusion-limit paths")
    p.add_argument("config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--dt", type=float, default=1e-3)
    p.add_argument("--horizon", type=float, default=10.0)
    p.set_defaults(func=_cmd_limit)

    p = sub.add_parser("map-solve", help="apply Phi or Psi to a grid path CSV (t, x, z1..zK)")
    p.add_argument("path")
    p.add_argument("--variant", choices=(ode_maps.PHI, ode_maps.PSI), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="scenario JSON supplying alpha, p and R")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--p", type=float, nargs="+")
    p.add_argument("--nu", type=float, nargs="+", help="phase rates; R = diag(nu) without a config")
    p.add_argument("--tol", type=float, default=ode_maps.DEFAULT_TOL)
    p.add_argument("--max-iter", type=int, default=ode_maps.DEFAULT_MAX_ITER)
    p.add_argument("--quadrature", choices=(ode_maps.TRAPEZOID, ode_maps.LEFT), default=ode_maps.TRAPEZOID)
    p.set_defaults(func=_cmd_map_solve)

    p = sub.add_parser("experiment", help="run a scaling experiment plan")
    p.add_argument("plan")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_experiment)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, PhaseTypeError, harness.InsufficientReplications, harness.WrongRegime,
            ode_maps.GridPathError, des_engine.SimulationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
