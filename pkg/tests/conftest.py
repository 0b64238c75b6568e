"""Shared fixtures and builders for the test suite."""

from __future__ import annotations

import random

import numpy as np
import pytest

from dshfl import (
    ClientDataset,
    FixedSchedule,
    GroupSpec,
    HyperParams,
    InitSpec,
    MinibatchSpec,
    Objective,
    ShiftedExponential,
    Topology,
    generate_synthetic,
)
from dshfl.delays import STREAM_DATA, RngStreams


def quadratic_client(hessian, minimizer=None, owner=(0, 0)) -> ClientDataset:
    """Client whose loss is exactly 0.5 (x - b)^T H (x - b) for PSD H."""
    h = np.asarray(hessian, dtype=np.float64)
    d = h.shape[0]
    b = np.zeros(d) if minimizer is None else np.asarray(minimizer, dtype=np.float64)
    vals, vecs = np.linalg.eigh(h)
    vals = np.clip(vals, 0.0, None)
    # rows a_j with (2/m) A^T A = H for m = d rows
    a = np.sqrt(d / 2.0) * (np.sqrt(vals)[:, None] * vecs.T)
    return ClientDataset(a, a @ b, owner=owner)


def toy_logistic_client(owner=(0, 0)) -> ClientDataset:
    features = np.array(
        [[1.0, 0.5], [-1.0, 0.25], [0.5, -1.0], [-0.25, 1.0]]
    )
    labels = np.array([1.0, 0.0, 1.0, 0.0])
    return ClientDataset(features, labels, owner=owner)


def central_difference(fn, x, step=1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = step
        grad[j] = (fn(x + e) - fn(x - e)) / (2.0 * step)
    return grad


def deterministic_delay(value: float) -> ShiftedExponential:
    return ShiftedExponential(shift=value, rate=float("inf"))


def random_tiny_setup(py_rng: random.Random):
    """Randomized tiny configuration: <=2 groups, <=3 clients, d<=3, <=5 rounds."""
    n_groups = py_rng.randint(1, 2)
    sizes = [py_rng.randint(1, 3) for _ in range(n_groups)]
    dim = py_rng.randint(1, 3)
    kind = py_rng.choice(["quadratic", "logistic"])
    seed = py_rng.randint(0, 10_000)

    if py_rng.random() < 0.5:
        group_delays = [deterministic_delay(py_rng.choice([0.5, 1.0, 2.0])) for _ in sizes]
        global_delay = deterministic_delay(py_rng.choice([1.0, 3.0]))
    else:
        group_delays = [
            ShiftedExponential(py_rng.uniform(0.2, 2.0), py_rng.choice([2.0, 10.0]))
            for _ in sizes
        ]
        global_delay = ShiftedExponential(py_rng.uniform(0.5, 3.0), 10.0)

    topology = Topology(
        groups=tuple(GroupSpec(n, d) for n, d in zip(sizes, group_delays)),
        global_delay=global_delay,
    )
    data_rng = RngStreams(seed).stream(STREAM_DATA)
    datasets = generate_synthetic(kind, dim, sizes, py_rng.randint(4, 10), data_rng)

    s = py_rng.choice([0.0, 1.0, 2.5, 5.0])
    # keep the budget small enough that at most ~5 rounds run
    min_round = min(d.shift for d in group_delays) + global_delay.shift
    total_time = max(1e-6, py_rng.randint(1, 5) * (max(s, min_round) + global_delay.shift))
    hyper = HyperParams(
        learning_rate=py_rng.choice([0.0, 0.01, 0.1]),
        schedule=FixedSchedule(s),
        total_time=total_time,
        batch=MinibatchSpec(py_rng.choice([1, 2, None])),
        clip_level=py_rng.choice([None, 1.0, 5.0]),
        init=InitSpec(kind=py_rng.choice(["zeros", "gaussian"]), scale=0.5),
    )
    return topology, Objective(kind), datasets, hyper, seed


@pytest.fixture
def identity_quadratic() -> ClientDataset:
    return quadratic_client(np.eye(2))


@pytest.fixture
def objective_quadratic() -> Objective:
    return Objective("quadratic")


@pytest.fixture
def objective_logistic() -> Objective:
    return Objective("logistic")
