"""Command-line entry point.

Subcommands:
    run       --config C [--seed N] [--out DIR]
    sweep     --config C --axis {sync_s,global_shift,association} --values LIST [--out DIR]
    fairness  --config C [--out DIR]
    schedule  --config C --ramp START,END,STEP [--fixed S] [--out DIR]

Sweep values are comma-separated; association values are colon-joined client
counts, e.g. --values 5:25,15:15,25:5.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from ..delays import FixedSchedule, RampSchedule
from .config import ConfigError, SweepSpec, parse_config
from .experiments import fairness_experiment, run_experiment, run_sweep, schedule_experiment


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dshfl",
        description="Deadline-driven hierarchical FL simulator and bound checker",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment per seed")
    run_p.add_argument("--config", required=True)
    run_p.add_argument("--seed", type=int, default=None,
                       help="run only this seed (default: every seed in the config)")
    run_p.add_argument("--out", default="runs")

    sweep_p = sub.add_parser("sweep", help="sweep one axis across the config seeds")
    sweep_p.add_argument("--config", required=True)
    sweep_p.add_argument("--axis", required=True,
                         choices=["sync_s", "global_shift", "association"])
    sweep_p.add_argument("--values", required=True)
    sweep_p.add_argument("--out", default="runs/sweep")

    fair_p = sub.add_parser("fairness", help="isolated vs cooperative per-group accuracy")
    fair_p.add_argument("--config", required=True)
    fair_p.add_argument("--out", default="runs/fairness")

    sched_p = sub.add_parser("schedule", help="fixed vs ramped sync time, paired seeds")
    sched_p.add_argument("--config", required=True)
    sched_p.add_argument("--ramp", required=True, metavar="START,END,STEP")
    sched_p.add_argument("--fixed", type=float, default=None,
                         help="fixed sync time (default: the ramp end)")
    sched_p.add_argument("--out", default="runs/schedule")
    return parser


def _parse_values(axis: str, text: str):
    items = [v.strip() for v in text.split(",") if v.strip()]
    if not items:
        raise ValueError("--values is empty")
    if axis == "association":
        return tuple(tuple(int(c) for c in item.split(":")) for item in items)
    return tuple(float(v) for v in items)


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = parse_config(args.config)
    except (ConfigError, FileNotFoundError, ValueError) as err:
        print(err, file=sys.stderr)
        return 2

    out = Path(args.out)
    try:
        if args.command == "run":
            seeds = [args.seed] if args.seed is not None else list(config.seeds)
            for seed in seeds:
                run = run_experiment(config, seed, out / f"seed_{seed}")
                print(
                    f"seed {seed}: {run.result.num_rounds} rounds, "
                    f"final loss {run.result.loss_trajectory[-1]:.6g} -> {run.run_dir}"
                )
        elif args.command == "sweep":
            spec = SweepSpec(axis=args.axis, values=_parse_values(args.axis, args.values))
            path = run_sweep(config, spec, out)
            print(f"sweep results in {path / 'sweep.csv'}")
        elif args.command == "fairness":
            path = fairness_experiment(config, out)
            print(f"fairness results in {path / 'fairness.csv'}")
        elif args.command == "schedule":
            parts = [float(v) for v in args.ramp.split(",")]
            if len(parts) != 3:
                raise ValueError("--ramp expects START,END,STEP")
            ramp = RampSchedule(start=parts[0], end=parts[1], step=parts[2])
            fixed_s = ramp.end if args.fixed is None else args.fixed
            path = schedule_experiment(config, fixed_s, ramp, out)
            print(f"schedule comparison in {path / 'schedule.csv'}")
    except ValueError as err:
        print(err, file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
