"""Client objectives: losses, exact and minibatch gradients, smoothness/noise
constants, and synthetic dataset generation with iid or label-skewed
client assignment.

Model vectors are plain 1-D float64 numpy arrays throughout; the dimension is
fixed by the feature dimension of the data and validated at every entry point.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Sequence

import numpy as np

ModelVector = np.ndarray

ObjectiveKind = Literal["quadratic", "logistic"]

_VALID_KINDS = ("quadratic", "logistic")
_VALID_PROVENANCE = ("exact", "estimated", "user-supplied")


def as_model_vector(values, dim: int | None = None) -> np.ndarray:
    """Validate and convert to a finite 1-D float64 parameter vector."""
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError(f"model vector must be 1-D, got shape {x.shape}")
    if x.size == 0:
        raise ValueError("model vector must be non-empty")
    if not np.isfinite(x).all():
        raise ValueError("model vector contains non-finite entries")
    if dim is not None and x.size != dim:
        raise ValueError(f"model vector has dimension {x.size}, expected {dim}")
    return x


@dataclass(frozen=True)
class ClientDataset:
    """Feature/label rows owned by one (group, client) pair."""

    features: np.ndarray  # (m, p)
    labels: np.ndarray    # (m,)
    owner: tuple[int, int] = (0, 0)

    def __post_init__(self) -> None:
        f = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.float64)
        if f.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {f.shape}")
        if f.shape[0] == 0:
            raise ValueError("client dataset must be non-empty")
        if y.shape != (f.shape[0],):
            raise ValueError(f"labels shape {y.shape} does not match {f.shape[0]} rows")
        if not (np.isfinite(f).all() and np.isfinite(y).all()):
            raise ValueError("dataset contains non-finite values")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class MinibatchSpec:
    """Uniform-with-replacement minibatch sampling.

    ``batch_size=None`` (or any size >= the dataset size) means a deterministic
    full pass: the gradient then equals the exact client gradient and no random
    draws are consumed.
    """

    batch_size: int | None = None

    def __post_init__(self) -> None:
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass(frozen=True)
class Objective:
    """Per-client loss family with optional L2 regularization.

    quadratic: F(x) = mean_j (a_j.x - y_j)^2 + (reg/2)||x||^2, closed-form
    Hessian (2/m) A^T A + reg*I.
    logistic:  F(x) = mean_j log(1 + exp(-s_j a_j.x)) + (reg/2)||x||^2 with
    s_j = +-1 derived from labels (positive labels map to +1).
    """

    kind: ObjectiveKind
    regularization: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in _VALID_KINDS:
            raise ValueError(f"unknown objective kind {self.kind!r}")
        if not (math.isfinite(self.regularization) and self.regularization >= 0):
            raise ValueError(f"regularization must be >= 0, got {self.regularization}")

    def loss(self, data: ClientDataset, x: ModelVector) -> float:
        x = as_model_vector(x, data.dim)
        if self.kind == "quadratic":
            r = data.features @ x - data.labels
            base = float(np.mean(r * r))
        else:
            z = _signs(data.labels) * (data.features @ x)
            base = float(np.mean(np.logaddexp(0.0, -z)))
        return base + 0.5 * self.regularization * float(x @ x)

    def full_gradient(self, data: ClientDataset, x: ModelVector) -> ModelVector:
        x = as_model_vector(x, data.dim)
        return self._gradient(data.features, data.labels, x)

    def stochastic_gradient(
        self,
        data: ClientDataset,
        x: ModelVector,
        batch: MinibatchSpec,
        rng: np.random.Generator,
    ) -> ModelVector:
        """Unbiased minibatch estimate of ``full_gradient``."""
        x = as_model_vector(x, data.dim)
        m = len(data)
        if batch.batch_size is None or batch.batch_size >= m:
            return self._gradient(data.features, data.labels, x)
        idx = rng.integers(0, m, size=batch.batch_size)
        return self._gradient(data.features[idx], data.labels[idx], x)

    def hessian(self, data: ClientDataset) -> np.ndarray:
        if self.kind != "quadratic":
            raise ValueError("closed-form Hessian is only available for quadratic objectives")
        a = data.features
        h = (2.0 / len(data)) * (a.T @ a)
        if self.regularization:
            h = h + self.regularization * np.eye(data.dim)
        return h

    def _gradient(self, features: np.ndarray, labels: np.ndarray, x: np.ndarray) -> np.ndarray:
        if self.kind == "quadratic":
            r = features @ x - labels
            g = (2.0 / features.shape[0]) * (features.T @ r)
        else:
            s = _signs(labels)
            z = s * (features @ x)
            # d/dz log(1+e^(-z)) = -sigmoid(-z)
            w = -s * _sigmoid(-z)
            g = (features.T @ w) / features.shape[0]
        if self.regularization:
            g = g + self.regularization * x
        return g


def _signs(labels: np.ndarray) -> np.ndarray:
    return np.where(labels > 0, 1.0, -1.0)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# Group and global losses
# ---------------------------------------------------------------------------

def group_loss(objective: Objective, datasets: Sequence[ClientDataset], x: ModelVector) -> float:
    """Unweighted mean of the group's client losses."""
    if not datasets:
        raise ValueError("group has no client datasets")
    return float(np.mean([objective.loss(d, x) for d in datasets]))


def group_gradient(objective: Objective, datasets: Sequence[ClientDataset], x: ModelVector) -> ModelVector:
    if not datasets:
        raise ValueError("group has no client datasets")
    return np.mean(np.stack([objective.full_gradient(d, x) for d in datasets]), axis=0)


def global_loss(
    objective: Objective, groups: Sequence[Sequence[ClientDataset]], x: ModelVector
) -> float:
    """Client-count-weighted average of group losses (equal weight per client)."""
    sizes = [len(g) for g in groups]
    total = sum(sizes)
    if total == 0:
        raise ValueError("no client datasets")
    return sum(n * group_loss(objective, g, x) for n, g in zip(sizes, groups)) / total


def global_gradient(
    objective: Objective, groups: Sequence[Sequence[ClientDataset]], x: ModelVector
) -> ModelVector:
    sizes = [len(g) for g in groups]
    total = sum(sizes)
    if total == 0:
        raise ValueError("no client datasets")
    acc = np.zeros_like(as_model_vector(x))
    for n, g in zip(sizes, groups):
        acc = acc + n * group_gradient(objective, g, x)
    return acc / total


def accuracy(features: np.ndarray, labels: np.ndarray, x: ModelVector) -> float:
    """Binary classification accuracy of the linear rule a.x > 0 (labels in {0,1} or +-1)."""
    pred = (features @ as_model_vector(x, features.shape[1])) > 0
    truth = labels > 0
    return float(np.mean(pred == truth))


# ---------------------------------------------------------------------------
# Gradient clipping
# ---------------------------------------------------------------------------

def clip_gradient(g: np.ndarray, limit: float) -> np.ndarray:
    """Rescale g to norm ``limit`` when it exceeds it; direction is preserved."""
    if not limit > 0:
        raise ValueError(f"clip limit must be > 0, got {limit}")
    g = np.asarray(g, dtype=np.float64)
    if not np.isfinite(g).all():
        raise ValueError("cannot clip a non-finite gradient")
    norm = float(np.linalg.norm(g))
    if norm <= limit:
        return g
    return g * (limit / norm)


# ---------------------------------------------------------------------------
# Smoothness / gradient-bound / noise constants
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SmoothnessConstants:
    """Constants entering the bound evaluators, with per-constant provenance."""

    smoothness: float          # L
    grad_bound: float          # G
    noise_std: float           # sigma
    smoothness_provenance: str = "user-supplied"
    grad_bound_provenance: str = "user-supplied"
    noise_std_provenance: str = "user-supplied"

    def __post_init__(self) -> None:
        if not self.smoothness > 0:
            raise ValueError(f"smoothness must be > 0, got {self.smoothness}")
        if not self.grad_bound > 0:
            raise ValueError(f"grad_bound must be > 0, got {self.grad_bound}")
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")
        for p in (
            self.smoothness_provenance,
            self.grad_bound_provenance,
            self.noise_std_provenance,
        ):
            if p not in _VALID_PROVENANCE:
                raise ValueError(f"unknown provenance {p!r}")


@dataclass(frozen=True)
class ProbeSpec:
    """How many random model points and minibatch draws to use when estimating
    the gradient bound and the stochastic-gradient noise level."""

    num_points: int = 8
    draws_per_point: int = 32
    point_scale: float = 1.0
    batch: MinibatchSpec = MinibatchSpec(1)

    def __post_init__(self) -> None:
        if self.num_points < 1:
            raise ValueError(f"num_points must be >= 1, got {self.num_points}")
        if self.draws_per_point < 1:
            raise ValueError(f"draws_per_point must be >= 1, got {self.draws_per_point}")


def largest_eigenvalue(mat: np.ndarray, tol: float = 1e-8, max_iter: int = 100_000) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration."""
    mat = np.asarray(mat, dtype=np.float64)
    n = mat.shape[0]
    # deterministic start with unequal components so the top eigenvector is never orthogonal
    v = 1.0 + 0.01 * np.arange(n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = mat @ v
        norm = float(np.linalg.norm(w))
        if norm == 0.0:
            return 0.0
        v = w / norm
        lam_new = float(v @ (mat @ v))
        if abs(lam_new - lam) <= tol * max(1.0, abs(lam_new)):
            return lam_new
        lam = lam_new
    return lam


def estimate_constants(
    objective: Objective,
    groups: Sequence[Sequence[ClientDataset]],
    probe: ProbeSpec,
    rng: np.random.Generator,
    clip_level: float | None = None,
) -> SmoothnessConstants:
    """Estimate (L, G, sigma) from the datasets.

    L is the exact largest client-Hessian eigenvalue for quadratics and the
    standard (max row norm^2)/4 + reg upper bound for logistic loss. G is the
    clip level when clipping is enabled, otherwise the largest stochastic
    gradient norm observed at the probe points. sigma is the largest observed
    per-client root-mean-square deviation of minibatch gradients from the
    exact client gradient.
    """
    clients = [d for g in groups for d in g]
    if not clients:
        raise ValueError("no client datasets")
    dim = clients[0].dim

    if objective.kind == "quadratic":
        smoothness = max(largest_eigenvalue(objective.hessian(d)) for d in clients)
        smoothness_prov = "exact"
    else:
        max_row = max(float(np.max(np.sum(d.features**2, axis=1))) for d in clients)
        smoothness = 0.25 * max_row + objective.regularization
        smoothness_prov = "exact"
    if smoothness <= 0:
        raise ValueError("degenerate dataset: estimated smoothness is not positive")

    points = [probe.point_scale * rng.standard_normal(dim) for _ in range(probe.num_points)]

    max_grad = 0.0
    max_var = 0.0
    for x in points:
        for d in clients:
            exact = objective.full_gradient(d, x)
            sq_dev = 0.0
            for _ in range(probe.draws_per_point):
                g = objective.stochastic_gradient(d, x, probe.batch, rng)
                if clip_level is not None:
                    g = clip_gradient(g, clip_level)
                max_grad = max(max_grad, float(np.linalg.norm(g)))
                diff = g - exact
                sq_dev += float(diff @ diff)
            max_var = max(max_var, sq_dev / probe.draws_per_point)

    if clip_level is not None:
        grad_bound, grad_prov = float(clip_level), "exact"
    else:
        grad_bound, grad_prov = max(max_grad, 1e-12), "estimated"

    return SmoothnessConstants(
        smoothness=smoothness,
        grad_bound=grad_bound,
        noise_std=math.sqrt(max_var),
        smoothness_provenance=smoothness_prov,
        grad_bound_provenance=grad_prov,
        noise_std_provenance="estimated",
    )


# ---------------------------------------------------------------------------
# Synthetic data and client assignment
# ---------------------------------------------------------------------------

def generate_pool(
    kind: ObjectiveKind,
    dim: int,
    n_samples: int,
    rng: np.random.Generator,
    *,
    noise: float = 0.1,
    margin: float = 3.0,
    weight_scale: float = 1.0,
    class_offset: float = 0.0,
    intercept: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Sample a pooled dataset.

    quadratic: gaussian features, labels a.w* + noise with w* ~ scaled gaussian.
    logistic: balanced gaussian blobs with centers (class_offset -+ margin/2)
    along a random unit direction, labels in {0, 1}. With class_offset = 0 the
    blobs are symmetric around the origin; a positive offset shifts both
    centers to the same side, which makes single-class data uninformative for
    a linear rule (useful for isolation baselines). ``intercept`` appends a
    constant 1 feature so the learned rule carries a bias term.
    """
    if dim < 1 or n_samples < 1:
        raise ValueError("dim and n_samples must be >= 1")
    if kind not in _VALID_KINDS:
        raise ValueError(f"unknown objective kind {kind!r}")
    if kind == "quadratic":
        w = weight_scale * rng.standard_normal(dim)
        features = rng.standard_normal((n_samples, dim))
        labels = features @ w + noise * rng.standard_normal(n_samples)
        return features, labels
    direction = rng.standard_normal(dim)
    direction /= np.linalg.norm(direction)
    labels = rng.integers(0, 2, size=n_samples).astype(np.float64)
    radius = class_offset + np.where(labels > 0, 0.5 * margin, -0.5 * margin)
    features = radius[:, None] * direction + rng.standard_normal((n_samples, dim))
    if intercept:
        features = np.hstack([features, np.ones((n_samples, 1))])
    return features, labels


def partition_pool(
    features: np.ndarray,
    labels: np.ndarray,
    clients_per_group: Sequence[int],
    mode: Literal["iid", "label_skew"],
    rng: np.random.Generator,
    skew: float = 0.0,
) -> list[list[ClientDataset]]:
    """Assign pooled samples to (group, client) slots.

    iid shuffles uniformly. label_skew splits the sorted distinct labels into
    contiguous blocks, one block per group; each sample is pinned to the group
    owning its label with probability ``skew`` and assigned uniformly at random
    otherwise, so skew 0 is iid and skew 1 gives fully disjoint group label
    sets. Label skew requires integer-valued labels.
    """
    if not 0.0 <= skew <= 1.0:
        raise ValueError(f"skew must be in [0, 1], got {skew}")
    if mode not in ("iid", "label_skew"):
        raise ValueError(f"unknown partition mode {mode!r}")
    if any(c < 1 for c in clients_per_group) or not clients_per_group:
        raise ValueError("each group needs at least one client")
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    n = features.shape[0]
    n_groups = len(clients_per_group)

    if mode == "iid" or skew == 0.0:
        group_of = rng.integers(0, n_groups, size=n)
    else:
        uniq = np.unique(labels)
        if not np.allclose(uniq, np.round(uniq)):
            raise ValueError("label_skew partitioning requires integer-valued labels")
        owner: dict[float, int] = {}
        for gid, block in enumerate(np.array_split(uniq, n_groups)):
            for lab in block:
                owner[float(lab)] = gid
        owned = np.array([owner[float(lab)] for lab in labels])
        pinned = rng.random(n) < skew
        group_of = np.where(pinned, owned, rng.integers(0, n_groups, size=n))

    out: list[list[ClientDataset]] = []
    for gid, n_clients in enumerate(clients_per_group):
        idx = np.flatnonzero(group_of == gid)
        idx = rng.permutation(idx)
        chunks = np.array_split(idx, n_clients)
        if any(len(c) == 0 for c in chunks):
            raise ValueError(
                f"group {gid} received {len(idx)} samples for {n_clients} clients; "
                "every client dataset must be non-empty"
            )
        out.append(
            [
                ClientDataset(features[c], labels[c], owner=(gid, cid))
                for cid, c in enumerate(chunks)
            ]
        )
    return out


def generate_synthetic(
    kind: ObjectiveKind,
    dim: int,
    clients_per_group: Sequence[int],
    samples_per_client: int,
    rng: np.random.Generator,
    **pool_kwargs,
) -> list[list[ClientDataset]]:
    """Generate iid per-client datasets directly (uniform shuffle of one pool)."""
    total = sum(clients_per_group)
    features, labels = generate_pool(kind, dim, samples_per_client * total, rng, **pool_kwargs)
    return partition_pool(features, labels, clients_per_group, "iid", rng)


def split_holdout(
    features: np.ndarray,
    labels: np.ndarray,
    fraction: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Random train/test split; returns (train_x, train_y, test_x, test_y)."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"holdout fraction must be in (0, 1), got {fraction}")
    n = features.shape[0]
    n_test = max(1, int(round(fraction * n)))
    if n_test >= n:
        raise ValueError("holdout split would leave no training data")
    perm = rng.permutation(n)
    test, train = perm[:n_test], perm[n_test:]
    return features[train], labels[train], features[test], labels[test]


def load_csv_dataset(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    """Load a dataset file with header feature_0..feature_{p-1},label."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"{path}: empty file")
        expected = [f"feature_{i}" for i in range(len(header) - 1)] + ["label"]
        if header != expected:
            raise ValueError(
                f"{path}: bad header {header!r}, expected feature_0..feature_{len(header) - 2},label"
            )
        rows = [[float(v) for v in row] for row in reader if row]
    if not rows:
        raise ValueError(f"{path}: no data rows")
    data = np.asarray(rows, dtype=np.float64)
    return data[:, :-1], data[:, -1]
