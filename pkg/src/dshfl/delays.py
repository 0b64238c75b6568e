"""Delay sampling, sync-time schedules, and keyed reproducible RNG streams."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

# Purpose codes for RNG sub-streams. Frozen: changing any value silently
# changes every downstream simulation result.
STREAM_INIT = 0
STREAM_LOCAL_DELAY = 1
STREAM_GLOBAL_DELAY = 2
STREAM_MINIBATCH = 3
STREAM_DATA = 4
STREAM_PROBE = 5


@dataclass(frozen=True)
class RngStreams:
    """Family of independent numpy generators keyed under one master seed.

    ``stream(*key)`` is a pure function of ``(master_seed, key)``: the
    generator it returns produces the same sequence no matter how many other
    streams exist or in what order they are consumed. Keys are small
    non-negative ints, by convention ``(purpose, group, client, round)``
    with unused trailing components omitted.
    """

    master_seed: int

    def __post_init__(self) -> None:
        if self.master_seed < 0:
            raise ValueError("master_seed must be non-negative")

    def stream(self, *key: int) -> np.random.Generator:
        if any(k < 0 for k in key):
            raise ValueError(f"stream key components must be non-negative, got {key}")
        return np.random.default_rng(np.random.SeedSequence((self.master_seed, *key)))


@dataclass(frozen=True)
class ShiftedExponential:
    """Delay distribution shift + Exp(rate): a hard minimum plus an exponential tail.

    ``rate=inf`` degenerates to the constant ``shift`` (used for deterministic
    delays in tests); a degenerate sample still consumes one draw from the
    generator so stream alignment is preserved across configurations.
    """

    shift: float
    rate: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.shift) and self.shift >= 0):
            raise ValueError(f"shift must be finite and >= 0, got {self.shift}")
        if not self.rate > 0:
            raise ValueError(f"rate must be > 0, got {self.rate}")

    @property
    def mean(self) -> float:
        return self.shift if math.isinf(self.rate) else self.shift + 1.0 / self.rate

    def sample(self, rng: np.random.Generator, size: int | None = None):
        scale = 0.0 if math.isinf(self.rate) else 1.0 / self.rate
        return self.shift + rng.exponential(scale, size=size)

    def sampler(self, rng: np.random.Generator) -> Callable[[], float]:
        """Zero-arg callable drawing one delay per call from ``rng``."""

        def next_delay() -> float:
            return float(self.sample(rng))

        return next_delay


@dataclass(frozen=True)
class FixedSchedule:
    """Constant sync time for every global round."""

    s: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.s) and self.s >= 0):
            raise ValueError(f"sync time must be finite and >= 0, got {self.s}")

    def sync_time(self, u: int) -> float:
        _check_round_index(u)
        return self.s


@dataclass(frozen=True)
class RampSchedule:
    """Sync time start + (u-1)*step, capped at end, then held there."""

    start: float
    end: float
    step: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.start) and self.start >= 0):
            raise ValueError(f"ramp start must be finite and >= 0, got {self.start}")
        if not (math.isfinite(self.end) and self.end >= self.start):
            raise ValueError(f"ramp end must be finite and >= start, got {self.end}")
        if not (math.isfinite(self.step) and self.step >= 0):
            raise ValueError(f"ramp step must be finite and >= 0, got {self.step}")

    def sync_time(self, u: int) -> float:
        _check_round_index(u)
        return min(self.start + (u - 1) * self.step, self.end)


SyncSchedule = Union[FixedSchedule, RampSchedule]


def _check_round_index(u: int) -> None:
    if u < 1:
        raise ValueError(f"round index must be >= 1, got {u}")


def sync_time_for_round(schedule: SyncSchedule, u: int) -> float:
    """Sync time S applied during global round u (1-based)."""
    return schedule.sync_time(u)


@dataclass(frozen=True)
class LocalIterationCount:
    """Outcome of running local iterations against a sync time."""

    t: int
    elapsed: float
    samples: tuple[float, ...]


def count_local_iterations(
    next_delay: Callable[[], float],
    sync_time: float,
    max_iterations: int = 10_000_000,
) -> LocalIterationCount:
    """Number of local iterations until cumulative delay first reaches ``sync_time``.

    The crossing iteration is included and completes, so ``elapsed >= sync_time``;
    a boundary tie counts as crossing. ``sync_time = 0`` always yields exactly
    one iteration (the centralized baseline: one exchange per global round).
    """
    if not (math.isfinite(sync_time) and sync_time >= 0):
        raise ValueError(f"sync_time must be finite and >= 0, got {sync_time}")
    samples: list[float] = []
    elapsed = 0.0
    while True:
        tau = float(next_delay())
        if not (math.isfinite(tau) and tau >= 0):
            raise ValueError(f"delay sample must be finite and >= 0, got {tau}")
        samples.append(tau)
        elapsed += tau
        if elapsed >= sync_time:
            break
        if len(samples) >= max_iterations:
            raise RuntimeError(
                f"no sync-time crossing after {max_iterations} iterations "
                f"(sync_time={sync_time}, elapsed={elapsed}); delays too small"
            )
    return LocalIterationCount(t=len(samples), elapsed=elapsed, samples=tuple(samples))
