"""Command-line entry points: `plan-eval` (batch evaluation) and
`plan-server` (digital-twin service)."""

import argparse
import logging
import os
import sys

import numpy as np

from .errors import NeedleTwinError, NoPuncture
from .evaluation import (
    NoiseModel,
    aggregate_report,
    load_observed_needles,
    load_planned_trajectories,
    load_targets,
    off_axis_error,
    run_synthetic_trial,
    surface_point_error,
    target_error,
)
from .geometry import load_mesh_obj
from .phantom import load_phantom_spec
from .service.server import PlanServer, load_case


def plan_eval_main(argv=None):
    parser = argparse.ArgumentParser(
        prog="plan-eval",
        description="Synthetic needle-insertion trials and placement error metrics",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run synthetic end-to-end trials")
    run_p.add_argument("--phantom", required=True, help="phantom spec file")
    run_p.add_argument("--targets", required=True, help="targets file (id label x y z)")
    run_p.add_argument("--noise", help="noise model file (omit for zero noise)")
    run_p.add_argument("--trials", type=int, default=1)
    run_p.add_argument("--seed", type=int, default=0)
    run_p.add_argument("--out", default="-", help="report path ('-' = stdout)")
    run_p.add_argument("--dims", type=int, nargs=3, default=(72, 80, 88))
    run_p.add_argument("--spacing", type=float, nargs=3, default=(2.0, 2.0, 2.2))
    run_p.add_argument("--workers", type=int, default=1)

    met_p = sub.add_parser("metrics", help="score observed needles against plans")
    met_p.add_argument("--observed", required=True, help="observed needles file")
    met_p.add_argument("--planned", required=True, help="planned trajectories file")
    met_p.add_argument("--skin", required=True, help="skin mesh (.obj)")
    met_p.add_argument("--out", default="-")

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return _eval_run(args)
        return _eval_metrics(args)
    except NeedleTwinError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _write_out(text, path):
    if path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _eval_run(args):
    spec = load_phantom_spec(args.phantom)
    targets = load_targets(args.targets)
    noise = NoiseModel.load(args.noise) if args.noise else NoiseModel.zero()
    reports = []
    for trial in range(args.trials):
        reports.extend(
            run_synthetic_trial(
                spec,
                tuple(args.dims),
                tuple(args.spacing),
                targets,
                noise,
                seed=args.seed + trial,
                workers=args.workers,
            )
        )
    agg = aggregate_report(reports)
    _write_out(agg.table(), args.out)
    return 0


def _eval_metrics(args):
    observed = dict(load_observed_needles(args.observed))
    planned = dict(load_planned_trajectories(args.planned))
    skin = load_mesh_obj(args.skin)
    lines = [f"{'id':<12}{'target_mm':>12}{'off_axis_mm':>12}{'surface_mm':>12}"]
    for needle_id in sorted(planned):
        if needle_id not in observed:
            continue
        obs, traj = observed[needle_id], planned[needle_id]
        te = target_error(obs, traj)
        oe = off_axis_error(obs, traj)
        try:
            se = surface_point_error(obs, traj, skin)
            se_s = f"{se:>12.3f}"
        except NoPuncture:
            se_s = f"{'no_puncture':>12}"
        lines.append(f"{needle_id:<12}{te:>12.3f}{oe:>12.3f}{se_s}")
    _write_out("\n".join(lines) + "\n", args.out)
    return 0


def plan_server_main(argv=None):
    parser = argparse.ArgumentParser(
        prog="plan-server", description="Digital-twin planning server"
    )
    parser.add_argument("--case", help="volume path prefix (<name>.vol/.volmeta)")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=4710)
    parser.add_argument("--workers", type=int, default=max(1, os.cpu_count() or 1))
    parser.add_argument(
        "--time-scale",
        type=float,
        default=1.0,
        help="execution simulation clock compression (1.0 = real time)",
    )
    args = parser.parse_args(argv)

    logging.basicConfig(
        level=getattr(logging, os.environ.get("PLAN_SERVER_LOG", "INFO").upper(), logging.INFO),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    case = None
    if args.case:
        try:
            case = load_case(args.case)
        except (OSError, NeedleTwinError) as exc:
            print(f"error: cannot load case {args.case!r}: {exc}", file=sys.stderr)
            return 2
    server = PlanServer(
        case=case,
        host=args.host,
        port=args.port,
        workers=args.workers,
        time_scale=args.time_scale,
    )
    server.start()
    print(f"plan-server listening on {server.host}:{server.port}", flush=True)
    server.serve_forever()
    return 0


if __name__ == "__main__":
    sys.exit(plan_eval_main() if "eval" in os.path.basename(sys.argv[0]) else plan_server_main())
