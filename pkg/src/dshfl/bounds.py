"""Closed-form deviation and convergence bounds, evaluated numerically with a
per-term breakdown so measured trajectories can be checked against them.

All bounds are evaluated conditionally on a realized iteration-count history.
The previous-round count for the first round is taken as 0 (there is no prior
drift: all groups start from the shared initialization).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence


@dataclass(frozen=True)
class IterationHistory:
    """Realized local-iteration counts, one row per round, one column per group."""

    counts: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        if not self.counts:
            raise ValueError("history must cover at least one round")
        width = len(self.counts[0])
        if width == 0:
            raise ValueError("history must cover at least one group")
        for row in self.counts:
            if len(row) != width:
                raise ValueError("history rows must all cover the same groups")
            for t in row:
                if t < 1:
                    raise ValueError(f"iteration counts must be >= 1, got {t}")
        object.__setattr__(self, "counts", tuple(tuple(int(t) for t in row) for row in self.counts))

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[int]]) -> "IterationHistory":
        return cls(tuple(tuple(r) for r in rows))

    @classmethod
    def constant(cls, counts_per_group: Sequence[int], num_rounds: int) -> "IterationHistory":
        return cls(tuple(tuple(counts_per_group) for _ in range(num_rounds)))

    @property
    def num_rounds(self) -> int:
        return len(self.counts)

    @property
    def num_groups(self) -> int:
        return len(self.counts[0])

    def for_group(self, i: int) -> tuple[int, ...]:
        return tuple(row[i] for row in self.counts)


@dataclass(frozen=True)
class BoundReport:
    """One evaluated bound: echoed inputs, named terms, and their sum."""

    name: str
    inputs: dict
    terms: dict
    flags: tuple[str, ...] = field(default=())

    @property
    def total(self) -> float:
        return float(sum(self.terms.values()))


def _check_sizes(group_sizes: Sequence[int]) -> list[int]:
    sizes = [int(n) for n in group_sizes]
    if not sizes:
        raise ValueError("need at least one group size")
    if any(n < 1 for n in sizes):
        raise ValueError(f"group sizes must be >= 1, got {sizes}")
    return sizes


def kappa(group_sizes: Sequence[int]) -> float:
    """Group-size imbalance factor |groups| * sum(n_i^2) / (sum n_i)^2.

    Equals 1 exactly when all groups have the same size and exceeds 1 otherwise.
    """
    sizes = _check_sizes(group_sizes)
    total = sum(sizes)
    return len(sizes) * sum(n * n for n in sizes) / (total * total)


def deviation_bound(
    t: int,
    group_sizes: Sequence[int],
    learning_rate: float,
    grad_bound: float,
) -> BoundReport:
    """Upper bound on E||x^{u+1} - x_i^{u,t}||^2 given group i ran t local
    iterations: 2 a^2 (t^2 + kappa) G^2, split into the group's own-iteration
    term and the all-groups imbalance term."""
    if t < 1:
        raise ValueError(f"iteration count must be >= 1, got {t}")
    if not learning_rate > 0:
        raise ValueError(f"learning_rate must be > 0, got {learning_rate}")
    if not grad_bound > 0:
        raise ValueError(f"grad_bound must be > 0, got {grad_bound}")
    k = kappa(group_sizes)
    scale = 2.0 * learning_rate**2 * grad_bound**2
    return BoundReport(
        name="deviation",
        inputs={
            "t": t,
            "group_sizes": tuple(group_sizes),
            "learning_rate": learning_rate,
            "grad_bound": grad_bound,
            "kappa": k,
        },
        terms={
            "own_iterations": scale * t * t,
            "group_imbalance": scale * k,
        },
    )


def group_convergence_bound(
    learning_rate: float,
    smoothness: float,
    grad_bound: float,
    noise_std: float,
    group_size: int,
    group_sizes: Sequence[int],
    counts: Sequence[int],
    loss_gap: float,
) -> BoundReport:
    """Bound on the t-weighted average of E||grad f_i||^2 over one group's local
    models across all rounds. ``counts`` is the group's realized iteration
    history t_i^1..t_i^U; ``loss_gap`` is f_i at the start minus f_i at the
    group's final local model. With a single round the restart and drift terms
    vanish (the isolated-group case)."""
    if not counts:
        raise ValueError("empty iteration history")
    if any(t < 1 for t in counts):
        raise ValueError("iteration counts must be >= 1")
    if group_size < 1:
        raise ValueError(f"group_size must be >= 1, got {group_size}")
    alpha, big_l, big_g = learning_rate, smoothness, grad_bound
    if not alpha > 0:
        raise ValueError(f"learning_rate must be > 0, got {alpha}")
    num_rounds = len(counts)
    total_iters = sum(counts)
    k = kappa(group_sizes)
    flags = _rate_flags(alpha, big_l)

    terms = {
        "loss_gap": 2.0 * loss_gap / (alpha * total_iters),
        "gradient_noise": alpha * big_l * noise_std**2 / group_size,
        "round_restarts": (1.0 / (alpha * total_iters) + 2.0 * (big_l + 1.0) * k * alpha / total_iters)
        * (num_rounds - 1)
        * big_g**2,
        "local_drift": (2.0 * (big_l + 1.0) * alpha / total_iters)
        * sum(t * t for t in counts[: num_rounds - 1])
        * big_g**2,
    }
    return BoundReport(
        name="group_convergence",
        inputs={
            "learning_rate": alpha,
            "smoothness": big_l,
            "grad_bound": big_g,
            "noise_std": noise_std,
            "group_size": group_size,
            "group_sizes": tuple(group_sizes),
            "num_rounds": num_rounds,
            "counts": tuple(counts),
            "loss_gap": loss_gap,
            "kappa": k,
        },
        terms=terms,
        flags=flags,
    )


def sum_squared_indices(t: int) -> int:
    """Closed form of sum_{l=0}^{t-1} l^2."""
    if t < 0:
        raise ValueError(f"t must be >= 0, got {t}")
    return (t - 1) * t * (2 * t - 1) // 6


def global_convergence_bound(
    learning_rate: float,
    smoothness: float,
    grad_bound: float,
    noise_std: float,
    group_sizes: Sequence[int],
    history: IterationHistory,
    loss_gap: float,
) -> BoundReport:
    """Bound on the round-averaged E||grad f(x^u)||^2 of the global model.

    ``loss_gap`` is the global loss at the initial model minus that at the final
    one. Five terms: the loss gap, aggregation noise, drift carried over from
    each previous round's iterations (zero contribution at the first round),
    a round-independent group-imbalance term, and the within-round drift term
    using (1/t) sum_{l<t} l^2 = (t-1)(2t-1)/6 in closed form.
    """
    sizes = _check_sizes(group_sizes)
    if history.num_groups != len(sizes):
        raise ValueError(
            f"history covers {history.num_groups} groups, sizes given for {len(sizes)}"
        )
    alpha, big_l, big_g = learning_rate, smoothness, grad_bound
    if not alpha > 0:
        raise ValueError(f"learning_rate must be > 0, got {alpha}")
    num_rounds = history.num_rounds
    total = sum(sizes)
    sq = sum(n * n for n in sizes)
    n_groups = len(sizes)
    flags = _rate_flags(alpha, big_l)

    prev_drift = 0.0
    within_drift = 0.0
    for u in range(num_rounds):
        for i, n in enumerate(sizes):
            t_prev = history.counts[u - 1][i] if u > 0 else 0
            prev_drift += n * n * t_prev * t_prev
            t = history.counts[u][i]
            within_drift += n * n * (sum_squared_indices(t) / t)

    terms = {
        "loss_gap": 2.0 * loss_gap / (alpha * num_rounds),
        "gradient_noise": alpha * big_l * n_groups * sq * noise_std**2 / total**2,
        "prev_round_drift": (12.0 * alpha**2 * big_l**2 * n_groups / total**2)
        * prev_drift
        / num_rounds,
        "group_imbalance": 12.0 * alpha**2 * big_l**2 * big_g**2 * n_groups**2 * sq * sq / total**4,
        "within_round_drift": (4.0 * alpha**2 * big_l**2 * big_g**2 * n_groups / total**2)
        * within_drift
        / num_rounds,
    }
    return BoundReport(
        name="global_convergence",
        inputs={
            "learning_rate": alpha,
            "smoothness": big_l,
            "grad_bound": big_g,
            "noise_std": noise_std,
            "group_sizes": tuple(sizes),
            "num_rounds": num_rounds,
            "loss_gap": loss_gap,
        },
        terms=terms,
        flags=flags,
    )


def max_local_iterations(sync_time: float, shift: float) -> int:
    """Largest possible iteration count when every delay is at least ``shift``:
    ceil(S / shift), floored at one iteration."""
    if not shift > 0:
        raise ValueError(f"shift must be > 0, got {shift}")
    if sync_time < 0:
        raise ValueError(f"sync_time must be >= 0, got {sync_time}")
    return max(1, math.ceil(sync_time / shift))


def sublinear_step_size(num_rounds: int, smoothness: float) -> float:
    """Step size min(1/sqrt(U), 1/L) under which the global bound is O(1/sqrt(U))."""
    if num_rounds < 1:
        raise ValueError(f"num_rounds must be >= 1, got {num_rounds}")
    if not smoothness > 0:
        raise ValueError(f"smoothness must be > 0, got {smoothness}")
    return min(1.0 / math.sqrt(num_rounds), 1.0 / smoothness)


def guarantee_bound(
    group_sizes: Sequence[int],
    smoothness: float,
    grad_bound: float,
    noise_std: float,
    num_rounds: int,
    iteration_caps: Sequence[int],
    loss_gap: float,
    learning_rate: float | None = None,
) -> BoundReport:
    """Global bound with every realized count replaced by the per-group cap.

    With the default step size min(1/sqrt(U), 1/L) the first two terms scale
    as 1/sqrt(U) and the drift terms as 1/U.
    """
    sizes = _check_sizes(group_sizes)
    if len(iteration_caps) != len(sizes):
        raise ValueError(
            f"got {len(iteration_caps)} iteration caps for {len(sizes)} groups"
        )
    alpha = sublinear_step_size(num_rounds, smoothness) if learning_rate is None else learning_rate
    history = IterationHistory.constant(iteration_caps, num_rounds)
    inner = global_convergence_bound(
        alpha, smoothness, grad_bound, noise_std, sizes, history, loss_gap
    )
    return BoundReport(
        name="global_guarantee",
        inputs={**inner.inputs, "iteration_caps": tuple(iteration_caps)},
        terms=dict(inner.terms),
        flags=inner.flags,
    )


def _rate_flags(alpha: float, smoothness: float) -> tuple[str, ...]:
    if smoothness > 0 and alpha > 1.0 / smoothness:
        return ("learning_rate_exceeds_1_over_L",)
    return ()
