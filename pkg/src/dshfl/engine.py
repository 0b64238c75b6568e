"""Execution of deadline-driven hierarchical FL: global rounds of per-group
local SGD under a sync time, bias-corrected uploads, weighted global
aggregation, and wall-clock accounting against a total time budget."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Literal, Sequence

import numpy as np

from .delays import (
    STREAM_GLOBAL_DELAY,
    STREAM_INIT,
    STREAM_LOCAL_DELAY,
    STREAM_MINIBATCH,
    LocalIterationCount,
    RngStreams,
    ShiftedExponential,
    SyncSchedule,
    count_local_iterations,
    sync_time_for_round,
)
from .objectives import (
    ClientDataset,
    MinibatchSpec,
    ModelVector,
    Objective,
    SmoothnessConstants,
    as_model_vector,
    clip_gradient,
    global_gradient,
    global_loss,
)


class SimulationError(RuntimeError):
    """Raised when the simulation state becomes invalid (e.g. non-finite models)."""


@dataclass(frozen=True)
class GroupSpec:
    """One local server: its client count and per-iteration delay distribution."""

    num_clients: int
    delay: ShiftedExponential

    def __post_init__(self) -> None:
        if self.num_clients < 1:
            raise ValueError(f"group needs at least one client, got {self.num_clients}")


@dataclass(frozen=True)
class Topology:
    groups: tuple[GroupSpec, ...]
    global_delay: ShiftedExponential

    def __post_init__(self) -> None:
        if not self.groups:
            raise ValueError("topology needs at least one group")
        object.__setattr__(self, "groups", tuple(self.groups))

    @property
    def group_sizes(self) -> tuple[int, ...]:
        return tuple(g.num_clients for g in self.groups)

    @property
    def total_clients(self) -> int:
        return sum(self.group_sizes)


@dataclass(frozen=True)
class InitSpec:
    """Initial global model: zeros or seeded gaussian of the given scale."""

    kind: Literal["zeros", "gaussian"] = "gaussian"
    scale: float = 0.01

    def __post_init__(self) -> None:
        if self.kind not in ("zeros", "gaussian"):
            raise ValueError(f"unknown init kind {self.kind!r}")
        if not (math.isfinite(self.scale) and self.scale >= 0):
            raise ValueError(f"init scale must be finite and >= 0, got {self.scale}")

    def draw(self, dim: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "zeros":
            return np.zeros(dim)
        return self.scale * rng.standard_normal(dim)


@dataclass(frozen=True)
class HyperParams:
    learning_rate: float
    schedule: SyncSchedule
    total_time: float
    batch: MinibatchSpec = MinibatchSpec()
    clip_level: float | None = None
    init: InitSpec = InitSpec()

    def __post_init__(self) -> None:
        if not (math.isfinite(self.learning_rate) and self.learning_rate >= 0):
            raise ValueError(f"learning_rate must be finite and >= 0, got {self.learning_rate}")
        if not (math.isfinite(self.total_time) and self.total_time > 0):
            raise ValueError(f"total_time must be finite and > 0, got {self.total_time}")
        if self.clip_level is not None and not self.clip_level > 0:
            raise ValueError(f"clip_level must be > 0, got {self.clip_level}")


@dataclass(frozen=True)
class IterationEvent:
    """One local iteration of one group: appended to the event log in execution order."""

    u: int
    group: int
    iteration: int
    delay: float


@dataclass(frozen=True)
class RoundEvent:
    """End of one global round."""

    u: int
    sync_period: float
    global_delay: float
    clock: float


@dataclass
class RoundRecord:
    """Telemetry for one completed global round (u is 1-based)."""

    u: int
    sync_time: float
    t_per_group: tuple[int, ...]
    elapsed_per_group: tuple[float, ...]
    sync_period: float
    global_delay: float
    clock: float
    global_model: np.ndarray
    local_models: tuple[np.ndarray, ...]
    deviations: tuple[float, ...]
    delay_samples: tuple[tuple[float, ...], ...]


@dataclass
class SimulationResult:
    initial_model: np.ndarray
    rounds: list[RoundRecord]
    loss_trajectory: list[float]      # global loss at x^1 .. x^{U+1}
    grad_sq_trajectory: list[float]   # ||grad f||^2 at x^1 .. x^{U+1}
    events: list[IterationEvent | RoundEvent] = field(default_factory=list)

    @property
    def num_rounds(self) -> int:
        return len(self.rounds)

    @property
    def final_model(self) -> np.ndarray:
        return self.rounds[-1].global_model

    @property
    def total_clock(self) -> float:
        return self.rounds[-1].clock

    def iteration_history(self) -> list[list[int]]:
        return [list(r.t_per_group) for r in self.rounds]


@dataclass(frozen=True)
class GroupRoundResult:
    """Outcome of one group's local phase within a global round."""

    final_model: np.ndarray
    t: int
    elapsed: float
    delays: tuple[float, ...]
    grad_sum: np.ndarray                 # sum of all (clipped) stochastic gradients used
    lps_models: tuple[np.ndarray, ...]   # local server model after iterations 0..t


def client_gradient(
    objective: Objective,
    dataset: ClientDataset,
    x: ModelVector,
    batch: MinibatchSpec,
    rng: np.random.Generator,
    clip_level: float | None = None,
) -> np.ndarray:
    g = objective.stochastic_gradient(dataset, x, batch, rng)
    if clip_level is not None:
        g = clip_gradient(g, clip_level)
    return g


def local_sgd_step(
    objective: Objective,
    dataset: ClientDataset,
    x: ModelVector,
    learning_rate: float,
    batch: MinibatchSpec,
    rng: np.random.Generator,
    clip_level: float | None = None,
) -> np.ndarray:
    """One client step from the shared local-server model."""
    g = client_gradient(objective, dataset, x, batch, rng, clip_level)
    x_new = x - learning_rate * g
    if not np.isfinite(x_new).all():
        raise SimulationError("client model became non-finite after an SGD step")
    return x_new


def local_aggregate(models: Sequence[np.ndarray]) -> np.ndarray:
    """Unweighted mean of the group's client models."""
    if not len(models):
        raise ValueError("cannot aggregate an empty model list")
    stacked = np.stack([as_model_vector(m) for m in models])
    if stacked.ndim != 2:
        raise ValueError("client models have mismatched dimensions")
    return np.mean(stacked, axis=0)


def run_group_round(
    objective: Objective,
    datasets: Sequence[ClientDataset],
    x_start: np.ndarray,
    sync_time: float,
    learning_rate: float,
    batch: MinibatchSpec,
    next_delay: Callable[[], float],
    client_rngs: Sequence[np.random.Generator],
    clip_level: float | None = None,
) -> GroupRoundResult:
    """Run one group's local iterations until the cumulative delay crosses the
    sync time. Every client steps from the same local-server model; the server
    averages and broadcasts after each step."""
    if len(datasets) != len(client_rngs):
        raise ValueError("need one rng stream per client")
    count = count_local_iterations(next_delay, sync_time)
    x_lps = as_model_vector(x_start)
    grad_sum = np.zeros_like(x_lps)
    trace = [x_lps]
    for l in range(1, count.t + 1):
        client_models = []
        for k, (dataset, rng) in enumerate(zip(datasets, client_rngs)):
            g = client_gradient(objective, dataset, x_lps, batch, rng, clip_level)
            grad_sum = grad_sum + g
            model = x_lps - learning_rate * g
            if not np.isfinite(model).all():
                raise SimulationError(
                    f"client {k} model became non-finite at local iteration {l}"
                )
            client_models.append(model)
        x_lps = local_aggregate(client_models)
        if not np.isfinite(x_lps).all():
            raise SimulationError(f"local model became non-finite at local iteration {l}")
        trace.append(x_lps)
    return GroupRoundResult(
        final_model=x_lps,
        t=count.t,
        elapsed=count.elapsed,
        delays=count.samples,
        grad_sum=grad_sum,
        lps_models=tuple(trace),
    )


def make_upload(x_init: np.ndarray, x_final: np.ndarray, t: int) -> np.ndarray:
    """Model difference divided by the number of local iterations, so that every
    group contributes one averaged step regardless of how many it completed."""
    if t < 1:
        raise ValueError(f"iteration count must be >= 1, got {t}")
    return (as_model_vector(x_final) - as_model_vector(x_init)) / t


def global_aggregate(
    x: np.ndarray, uploads: Sequence[np.ndarray], group_sizes: Sequence[int]
) -> np.ndarray:
    """Client-count-weighted sum of group uploads added to the current model."""
    if len(uploads) != len(group_sizes):
        raise ValueError(
            f"got {len(uploads)} uploads for {len(group_sizes)} groups; "
            "every group must upload each round"
        )
    total = sum(group_sizes)
    out = as_model_vector(x).copy()
    for upload, size in zip(uploads, group_sizes):
        out += (size / total) * as_model_vector(upload)
    return out


def measure_deviation(
    global_model: np.ndarray, local_models: Sequence[np.ndarray]
) -> tuple[float, ...]:
    """Squared Euclidean distance between the aggregated model and each group's
    final local model."""
    g = as_model_vector(global_model)
    out = []
    for m in local_models:
        d = g - as_model_vector(m)
        out.append(float(d @ d))
    return tuple(out)


def run_simulation(
    topology: Topology,
    objective: Objective,
    datasets: Sequence[Sequence[ClientDataset]],
    hyper: HyperParams,
    seed: int,
    *,
    delay_seed: int | None = None,
    constants: SmoothnessConstants | None = None,
    max_rounds: int | None = None,
) -> SimulationResult:
    """Run global rounds until the cumulative wall clock first reaches the total
    time budget; the crossing round completes and is kept.

    ``seed`` drives initialization and minibatch noise. ``delay_seed`` (default:
    same as ``seed``) drives the delay draws through streams keyed per
    (group, round), so runs that differ only in sync time consume identical
    delay sequences. Fully deterministic given both seeds.
    """
    if len(datasets) != len(topology.groups):
        raise ValueError(f"got {len(datasets)} dataset groups for {len(topology.groups)} groups")
    for spec, group in zip(topology.groups, datasets):
        if len(group) != spec.num_clients:
            raise ValueError(
                f"group has {len(group)} client datasets but topology says {spec.num_clients}"
            )
    if constants is not None and hyper.learning_rate > 1.0 / constants.smoothness:
        warnings.warn(
            f"learning rate {hyper.learning_rate} exceeds 1/L = "
            f"{1.0 / constants.smoothness:.6g}; convergence bounds assume "
            "learning_rate <= 1/L",
            RuntimeWarning,
            stacklevel=2,
        )

    noise = RngStreams(seed)
    delays = RngStreams(seed if delay_seed is None else delay_seed)
    sizes = topology.group_sizes
    dim = datasets[0][0].dim
    x = hyper.init.draw(dim, noise.stream(STREAM_INIT))

    result = SimulationResult(
        initial_model=x,
        rounds=[],
        loss_trajectory=[global_loss(objective, datasets, x)],
        grad_sq_trajectory=[_grad_sq(objective, datasets, x)],
    )

    clock = 0.0
    u = 1
    while True:
        s_u = sync_time_for_round(hyper.schedule, u)
        group_results: list[GroupRoundResult] = []
        for i, spec in enumerate(topology.groups):
            sampler = spec.delay.sampler(delays.stream(STREAM_LOCAL_DELAY, i, u))
            client_rngs = [
                noise.stream(STREAM_MINIBATCH, i, k, u) for k in range(spec.num_clients)
            ]
            try:
                gr = run_group_round(
                    objective,
                    datasets[i],
                    x,
                    s_u,
                    hyper.learning_rate,
                    hyper.batch,
                    sampler,
                    client_rngs,
                    hyper.clip_level,
                )
            except SimulationError as err:
                raise SimulationError(f"round {u}, group {i}: {err}") from err
            group_results.append(gr)
            for l, tau in enumerate(gr.delays, start=1):
                result.events.append(IterationEvent(u=u, group=i, iteration=l, delay=tau))

        uploads = [make_upload(x, gr.final_model, gr.t) for gr in group_results]
        x_next = global_aggregate(x, uploads, sizes)
        if not np.isfinite(x_next).all():
            raise SimulationError(f"round {u}: global model became non-finite")

        sync_period = max(gr.elapsed for gr in group_results)
        tau_g = float(topology.global_delay.sample(delays.stream(STREAM_GLOBAL_DELAY, u)))
        clock += sync_period + tau_g

        result.rounds.append(
            RoundRecord(
                u=u,
                sync_time=s_u,
                t_per_group=tuple(gr.t for gr in group_results),
                elapsed_per_group=tuple(gr.elapsed for gr in group_results),
                sync_period=sync_period,
                global_delay=tau_g,
                clock=clock,
                global_model=x_next,
                local_models=tuple(gr.final_model for gr in group_results),
                deviations=measure_deviation(x_next, [gr.final_model for gr in group_results]),
                delay_samples=tuple(gr.delays for gr in group_results),
            )
        )
        result.events.append(
            RoundEvent(u=u, sync_period=sync_period, global_delay=tau_g, clock=clock)
        )
        result.loss_trajectory.append(global_loss(objective, datasets, x_next))
        result.grad_sq_trajectory.append(_grad_sq(objective, datasets, x_next))

        x = x_next
        if clock >= hyper.total_time:
            break
        if max_rounds is not None and u >= max_rounds:
            raise SimulationError(
                f"time budget {hyper.total_time} not reached after max_rounds={max_rounds}"
            )
        u += 1
    return result


def _grad_sq(objective: Objective, datasets: Sequence[Sequence[ClientDataset]], x) -> float:
    g = global_gradient(objective, datasets, x)
    return float(g @ g)
