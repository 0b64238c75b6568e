"""Experiment orchestration: single runs, parameter sweeps, isolation/fairness
comparisons, fixed-versus-ramp schedule comparisons, and CSV emission.

rounds.csv columns (exact order, N = number of groups):
    u, wall_clock, t_g1..t_gN, f_global, grad_norm_sq,
    loss_g1..loss_gN, acc_g1..acc_gN, dev_g1..dev_gN, lemma1_g1..lemma1_gN
f_global and grad_norm_sq are full-batch values at the round's starting model;
loss_gi / acc_gi are evaluated at group i's final local model of the round
(training loss, held-out accuracy); dev_gi is the squared distance between the
aggregated model and that local model; lemma1_gi is the deviation bound at the
realized iteration count. Accuracy cells are empty for quadratic objectives.

bounds.csv has one row per run: the inputs fed to the global convergence bound
and its five terms t2_term1..t2_term5 plus t2_total.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..bounds import (
    BoundReport,
    IterationHistory,
    deviation_bound,
    global_convergence_bound,
)
from ..delays import STREAM_PROBE, FixedSchedule, RampSchedule, RngStreams
from ..engine import (
    SimulationError,
    SimulationResult,
    measure_deviation,
    run_simulation,
)
from ..objectives import (
    ProbeSpec,
    SmoothnessConstants,
    accuracy,
    estimate_constants,
    group_loss,
)
from .config import BuiltData, ExperimentConfig, SweepSpec

__all__ = [
    "RunOutput",
    "run_experiment",
    "run_sweep",
    "fairness_experiment",
    "schedule_experiment",
    "measure_deviation",
]

T2_TERM_ORDER = (
    "loss_gap",
    "gradient_noise",
    "prev_round_drift",
    "group_imbalance",
    "within_round_drift",
)


@dataclass
class RunOutput:
    seed: int
    result: SimulationResult
    constants: SmoothnessConstants
    data: BuiltData
    global_bound: BoundReport
    final_accuracy: float | None
    run_dir: Path


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([v if isinstance(v, str) else _fmt(v) for v in row])


def _estimate_run_constants(
    config: ExperimentConfig, data: BuiltData, seed: int
) -> SmoothnessConstants:
    rng = RngStreams(seed).stream(STREAM_PROBE)
    return estimate_constants(
        config.objective,
        data.groups,
        ProbeSpec(),
        rng,
        clip_level=config.training.clip,
    )


def _final_accuracy(config: ExperimentConfig, data: BuiltData, model) -> float | None:
    if config.objective.kind != "logistic" or not data.has_holdout:
        return None
    return accuracy(data.test_features, data.test_labels, model)


def run_experiment(
    config: ExperimentConfig,
    seed: int,
    out_dir: str | Path,
    *,
    delay_seed: int | None = None,
) -> RunOutput:
    """Run one simulation and write rounds.csv, bounds.csv, and summary.csv.

    A failed run leaves ``status.txt`` containing the failure before the engine
    error propagates.
    """
    run_dir = Path(out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    data = config.build_data(seed)
    constants = _estimate_run_constants(config, data, seed)
    try:
        result = run_simulation(
            config.topology(),
            config.objective,
            data.groups,
            config.hyperparams(),
            seed,
            delay_seed=delay_seed,
            constants=constants,
        )
    except SimulationError as err:
        (run_dir / "status.txt").write_text(f"failed: {err}\n")
        raise
    (run_dir / "status.txt").write_text("ok\n")

    n_groups = len(config.groups)
    obj = config.objective
    alpha = config.training.learning_rate

    header = (
        ["u", "wall_clock"]
        + [f"t_g{i + 1}" for i in range(n_groups)]
        + ["f_global", "grad_norm_sq"]
        + [f"loss_g{i + 1}" for i in range(n_groups)]
        + [f"acc_g{i + 1}" for i in range(n_groups)]
        + [f"dev_g{i + 1}" for i in range(n_groups)]
        + [f"lemma1_g{i + 1}" for i in range(n_groups)]
    )
    rows = []
    for rec in result.rounds:
        # one row per round always; per-group metrics follow the cadence
        on_cadence = (rec.u - 1) % config.metric_cadence == 0 or rec.u == result.num_rounds
        if on_cadence:
            group_losses = [
                group_loss(obj, data.groups[i], rec.local_models[i]) for i in range(n_groups)
            ]
        else:
            group_losses = [None] * n_groups
        if on_cadence and obj.kind == "logistic" and data.has_holdout:
            group_accs = [
                accuracy(data.test_features, data.test_labels, rec.local_models[i])
                for i in range(n_groups)
            ]
        else:
            group_accs = [None] * n_groups
        lemma_vals = [
            deviation_bound(
                rec.t_per_group[i], config.groups, alpha, constants.grad_bound
            ).total
            for i in range(n_groups)
        ]
        rows.append(
            [rec.u, rec.clock]
            + list(rec.t_per_group)
            + [result.loss_trajectory[rec.u - 1], result.grad_sq_trajectory[rec.u - 1]]
            + group_losses
            + group_accs
            + list(rec.deviations)
            + lemma_vals
        )
    _write_csv(run_dir / "rounds.csv", header, rows)

    loss_gap = result.loss_trajectory[0] - (
        config.loss_floor if config.loss_floor is not None else result.loss_trajectory[-1]
    )
    report = global_convergence_bound(
        alpha,
        constants.smoothness,
        constants.grad_bound,
        constants.noise_std,
        config.groups,
        IterationHistory.from_rows(result.iteration_history()),
        loss_gap,
    )
    bound_header = (
        ["seed", "num_rounds", "learning_rate", "smoothness", "grad_bound", "noise_std",
         "grad_bound_mode", "loss_gap", "group_sizes"]
        + [f"t2_term{j + 1}" for j in range(len(T2_TERM_ORDER))]
        + ["t2_total"]
    )
    g_mode = "clipped" if config.training.clip is not None else "empirical"
    bound_row = (
        [seed, result.num_rounds, alpha, constants.smoothness, constants.grad_bound,
         constants.noise_std, g_mode, loss_gap, ";".join(str(n) for n in config.groups)]
        + [report.terms[name] for name in T2_TERM_ORDER]
        + [report.total]
    )
    _write_csv(run_dir / "bounds.csv", bound_header, [bound_row])

    final_acc = _final_accuracy(config, data, result.final_model)
    _write_csv(
        run_dir / "summary.csv",
        ["seed", "num_rounds", "wall_clock", "f_initial", "f_final",
         "grad_norm_sq_final", "acc_final", "t2_total"],
        [[seed, result.num_rounds, result.total_clock, result.loss_trajectory[0],
          result.loss_trajectory[-1], result.grad_sq_trajectory[-1], final_acc,
          report.total]],
    )
    return RunOutput(
        seed=seed,
        result=result,
        constants=constants,
        data=data,
        global_bound=report,
        final_accuracy=final_acc,
        run_dir=run_dir,
    )


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

def _apply_axis(config: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "sync_s":
        return config.with_sync(float(value))
    if axis == "global_shift":
        return config.with_global_shift(float(value))
    if axis == "association":
        return config.with_association([int(v) for v in value])
    raise ValueError(f"unknown sweep axis {axis!r}")


def _axis_label(axis: str, value) -> str:
    if axis == "association":
        return ":".join(str(int(v)) for v in value)
    return _fmt(float(value))


def run_sweep(
    config: ExperimentConfig,
    sweep: SweepSpec,
    out_dir: str | Path,
) -> Path:
    """Run every (axis value, seed) pair and write sweep.csv (one row per pair)
    plus sweep_summary.csv (mean and standard error of the finals per value).

    Delay streams are keyed per (group, round, draw index) independently of the
    sync time, so points of a sync-time sweep share common random numbers.
    Failed points are recorded and the sweep continues.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    summary_rows = []
    for value in sweep.values:
        point_cfg = _apply_axis(config, sweep.axis, value)
        label = _axis_label(sweep.axis, value)
        finals: list[tuple[float, float | None]] = []
        for seed in config.seeds:
            data = point_cfg.build_data(seed)
            try:
                result = run_simulation(
                    point_cfg.topology(),
                    point_cfg.objective,
                    data.groups,
                    point_cfg.hyperparams(),
                    seed,
                    delay_seed=seed,
                )
            except SimulationError as err:
                rows.append([sweep.axis, label, seed, f"failed: {err}", None, None, None, None])
                continue
            acc = _final_accuracy(point_cfg, data, result.final_model)
            rows.append(
                [sweep.axis, label, seed, "ok", result.num_rounds, result.total_clock,
                 result.loss_trajectory[-1], acc]
            )
            finals.append((result.loss_trajectory[-1], acc))
        losses = [f for f, _ in finals]
        accs = [a for _, a in finals if a is not None]
        summary_rows.append(
            [sweep.axis, label, len(finals),
             _mean(losses), _stderr(losses), _mean(accs), _stderr(accs)]
        )
    _write_csv(
        out / "sweep.csv",
        ["axis", "value", "seed", "status", "num_rounds", "wall_clock", "f_final", "acc_final"],
        rows,
    )
    _write_csv(
        out / "sweep_summary.csv",
        ["axis", "value", "n_ok", "f_mean", "f_stderr", "acc_mean", "acc_stderr"],
        summary_rows,
    )
    return out


def _mean(values: Sequence[float]) -> float | None:
    return float(np.mean(values)) if values else None


def _stderr(values: Sequence[float]) -> float | None:
    if not values:
        return None
    if len(values) == 1:
        return 0.0
    return float(np.std(values, ddof=1) / math.sqrt(len(values)))


# ---------------------------------------------------------------------------
# Fairness: isolated groups versus cooperative training
# ---------------------------------------------------------------------------

def fairness_experiment(config: ExperimentConfig, out_dir: str | Path) -> Path:
    """Compare each group trained in isolation against the cooperative run.

    Isolation keeps everything (schedule, time budget, the group's own data and
    delays) and drops the other groups from the topology, so with a single
    group the two regimes coincide. Per-group accuracy is the group's final
    local model evaluated on the shared held-out split; requires a logistic
    objective with a holdout.
    """
    if config.objective.kind != "logistic":
        raise ValueError("fairness experiment requires a logistic objective (accuracy metric)")
    if config.dataset.holdout <= 0:
        raise ValueError("fairness experiment requires a held-out split")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in config.seeds:
        data = config.build_data(seed)
        joint = run_simulation(
            config.topology(), config.objective, data.groups,
            config.hyperparams(), seed, delay_seed=seed,
        )
        for i, n_clients in enumerate(config.groups):
            iso_cfg = config.restrict_to_group(i)
            iso = run_simulation(
                iso_cfg.topology(), iso_cfg.objective, (data.groups[i],),
                iso_cfg.hyperparams(), seed, delay_seed=seed,
            )
            acc_iso = accuracy(
                data.test_features, data.test_labels, iso.rounds[-1].local_models[0]
            )
            acc_hfl = accuracy(
                data.test_features, data.test_labels, joint.rounds[-1].local_models[i]
            )
            rows.append([seed, i, n_clients, acc_iso, acc_hfl, acc_hfl - acc_iso])
    _write_csv(
        out / "fairness.csv",
        ["seed", "group", "clients", "acc_isolated", "acc_hfl", "margin"],
        rows,
    )
    return out


# ---------------------------------------------------------------------------
# Fixed versus ramped sync time
# ---------------------------------------------------------------------------

def schedule_experiment(
    config: ExperimentConfig,
    fixed_s: float,
    ramp: RampSchedule,
    out_dir: str | Path,
) -> Path:
    """Paired fixed-vs-ramp runs on identical seeds and delay streams.

    The ramp must end at the fixed sync time so the two schedules agree once
    the ramp is exhausted. Writes schedule.csv (per-round trajectories of both
    variants) and schedule_summary.csv (per-seed finals and their difference).
    """
    if ramp.end != fixed_s:
        raise ValueError(f"ramp end ({ramp.end}) must equal the fixed sync time ({fixed_s})")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    traj_rows = []
    summary_rows = []
    for seed in config.seeds:
        data = config.build_data(seed)
        finals = {}
        for variant, schedule in (("fixed", FixedSchedule(fixed_s)), ("ramp", ramp)):
            cfg = config.with_schedule(schedule)
            result = run_simulation(
                cfg.topology(), cfg.objective, data.groups,
                cfg.hyperparams(), seed, delay_seed=seed,
            )
            for rec in result.rounds:
                acc = _final_accuracy(cfg, data, rec.global_model)
                traj_rows.append(
                    [variant, seed, rec.u, rec.clock,
                     result.loss_trajectory[rec.u], acc]
                )
            finals[variant] = (
                result.loss_trajectory[-1],
                _final_accuracy(cfg, data, result.final_model),
            )
        f_fixed, a_fixed = finals["fixed"]
        f_ramp, a_ramp = finals["ramp"]
        acc_diff = None if a_fixed is None else a_ramp - a_fixed
        summary_rows.append(
            [seed, f_fixed, f_ramp, f_fixed - f_ramp, a_fixed, a_ramp, acc_diff]
        )
    _write_csv(
        out / "schedule.csv",
        ["variant", "seed", "u", "wall_clock", "f_global", "acc_global"],
        traj_rows,
    )
    _write_csv(
        out / "schedule_summary.csv",
        ["seed", "f_fixed", "f_ramp", "f_fixed_minus_ramp",
         "acc_fixed", "acc_ramp", "acc_ramp_minus_fixed"],
        summary_rows,
    )
    return out
