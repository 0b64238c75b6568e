"""Experiment configuration: YAML parsing with fail-closed schema validation.

Unknown keys, type mismatches, and constraint violations are all collected
with their dotted key paths and reported together.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Literal, Sequence

import yaml

from ..delays import (
    STREAM_DATA,
    FixedSchedule,
    RampSchedule,
    RngStreams,
    ShiftedExponential,
    SyncSchedule,
)
from ..engine import GroupSpec, HyperParams, InitSpec, Topology
from ..objectives import (
    ClientDataset,
    MinibatchSpec,
    Objective,
    generate_pool,
    load_csv_dataset,
    partition_pool,
    split_holdout,
)


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists every problem with its key path."""

    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("invalid config:\n  " + "\n  ".join(self.errors))


@dataclass(frozen=True)
class DatasetSpec:
    source: Literal["synthetic", "file"] = "synthetic"
    path: str | None = None
    features: int = 5
    samples_per_client: int = 40
    partition_mode: Literal["iid", "label_skew"] = "iid"
    skew: float = 0.0
    holdout: float = 0.2
    noise: float = 0.1
    margin: float = 3.0
    class_offset: float = 0.0
    intercept: bool = False


@dataclass(frozen=True)
class TrainingSpec:
    learning_rate: float = 0.05
    total_time: float = 100.0
    batch_size: int | None = None
    clip: float | None = None
    init: InitSpec = field(default_factory=InitSpec)


@dataclass(frozen=True)
class BuiltData:
    """Materialized per-client training data plus the shared held-out split."""

    groups: tuple[tuple[ClientDataset, ...], ...]
    test_features: Any = None
    test_labels: Any = None

    @property
    def has_holdout(self) -> bool:
        return self.test_features is not None


@dataclass(frozen=True)
class ExperimentConfig:
    groups: tuple[int, ...]
    group_delays: tuple[ShiftedExponential, ...]
    global_delay: ShiftedExponential
    schedule: SyncSchedule
    objective: Objective
    dataset: DatasetSpec
    training: TrainingSpec
    seeds: tuple[int, ...]
    metric_cadence: int = 1
    loss_floor: float | None = None

    def topology(self) -> Topology:
        return Topology(
            groups=tuple(
                GroupSpec(num_clients=n, delay=d)
                for n, d in zip(self.groups, self.group_delays)
            ),
            global_delay=self.global_delay,
        )

    def hyperparams(self) -> HyperParams:
        return HyperParams(
            learning_rate=self.training.learning_rate,
            schedule=self.schedule,
            total_time=self.training.total_time,
            batch=MinibatchSpec(self.training.batch_size),
            clip_level=self.training.clip,
            init=self.training.init,
        )

    def with_sync(self, s: float) -> "ExperimentConfig":
        return replace(self, schedule=FixedSchedule(s))

    def with_schedule(self, schedule: SyncSchedule) -> "ExperimentConfig":
        return replace(self, schedule=schedule)

    def with_global_shift(self, shift: float) -> "ExperimentConfig":
        return replace(
            self, global_delay=ShiftedExponential(shift, self.global_delay.rate)
        )

    def with_association(self, clients: Sequence[int]) -> "ExperimentConfig":
        if len(clients) != len(self.groups):
            raise ValueError(
                f"association vector has {len(clients)} entries for {len(self.groups)} groups"
            )
        return replace(self, groups=tuple(int(c) for c in clients))

    def restrict_to_group(self, i: int) -> "ExperimentConfig":
        """Single-group config used for isolated-training baselines."""
        return replace(
            self, groups=(self.groups[i],), group_delays=(self.group_delays[i],)
        )

    def build_data(self, seed: int) -> BuiltData:
        """Materialize client datasets and the held-out split for one run seed."""
        rng = RngStreams(seed).stream(STREAM_DATA)
        ds = self.dataset
        if ds.source == "file":
            features, labels = load_csv_dataset(ds.path)
            if ds.holdout > 0:
                train_x, train_y, test_x, test_y = split_holdout(
                    features, labels, ds.holdout, rng
                )
            else:
                train_x, train_y, test_x, test_y = features, labels, None, None
        else:
            n_train = ds.samples_per_client * sum(self.groups)
            kwargs = dict(
                noise=ds.noise,
                margin=ds.margin,
                class_offset=ds.class_offset,
                intercept=ds.intercept,
            )
            if ds.holdout > 0:
                # one pool, one split: train and holdout share the same task
                n_total = n_train + max(1, round(ds.holdout * n_train / (1.0 - ds.holdout)))
                pool_x, pool_y = generate_pool(
                    self.objective.kind, ds.features, n_total, rng, **kwargs
                )
                train_x, train_y, test_x, test_y = split_holdout(
                    pool_x, pool_y, 1.0 - n_train / n_total, rng
                )
            else:
                train_x, train_y = generate_pool(
                    self.objective.kind, ds.features, n_train, rng, **kwargs
                )
                test_x, test_y = None, None
        groups = partition_pool(
            train_x, train_y, self.groups, ds.partition_mode, rng, skew=ds.skew
        )
        return BuiltData(
            groups=tuple(tuple(g) for g in groups),
            test_features=test_x,
            test_labels=test_y,
        )


@dataclass(frozen=True)
class SweepSpec:
    """One sweep axis and its values; every config seed runs at every value."""

    axis: Literal["sync_s", "global_shift", "association"]
    values: tuple

    def __post_init__(self) -> None:
        if self.axis not in ("sync_s", "global_shift", "association"):
            raise ValueError(f"unknown sweep axis {self.axis!r}")
        if not self.values:
            raise ValueError("sweep needs at least one value")


# ---------------------------------------------------------------------------
# Validation machinery
# ---------------------------------------------------------------------------

class _Ctx:
    def __init__(self) -> None:
        self.errors: list[str] = []

    def error(self, path: str, message: str) -> None:
        self.errors.append(f"{path}: {message}")


def _expect_mapping(ctx: _Ctx, node: Any, path: str, allowed: Sequence[str]) -> dict:
    if node is None:
        return {}
    if not isinstance(node, dict):
        ctx.error(path, f"expected a mapping, got {type(node).__name__}")
        return {}
    for key in node:
        if key not in allowed:
            ctx.error(f"{path}.{key}" if path else str(key), "unknown key")
    return node


def _number(ctx, node, key, path, default=None, *, minimum=None, exclusive_min=None,
            maximum=None, required=False, allow_none=False):
    if key not in node or node[key] is None:
        if key in node and allow_none:
            return None
        if required:
            ctx.error(f"{path}.{key}", "required key is missing")
            return default
        return default
    v = node[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        ctx.error(f"{path}.{key}", f"expected a number, got {type(v).__name__}")
        return default
    v = float(v)
    if not math.isfinite(v):
        ctx.error(f"{path}.{key}", "must be finite")
        return default
    if minimum is not None and v < minimum:
        ctx.error(f"{path}.{key}", f"must be >= {minimum}, got {v}")
        return default
    if exclusive_min is not None and v <= exclusive_min:
        ctx.error(f"{path}.{key}", f"must be > {exclusive_min}, got {v}")
        return default
    if maximum is not None and v > maximum:
        ctx.error(f"{path}.{key}", f"must be <= {maximum}, got {v}")
        return default
    return v


def _integer(ctx, node, key, path, default=None, *, minimum=None, required=False,
             allow_none=False):
    if key not in node or node[key] is None:
        if key in node and allow_none:
            return None
        if required:
            ctx.error(f"{path}.{key}", "required key is missing")
        return default
    v = node[key]
    if isinstance(v, bool) or not isinstance(v, int):
        ctx.error(f"{path}.{key}", f"expected an integer, got {type(v).__name__}")
        return default
    if minimum is not None and v < minimum:
        ctx.error(f"{path}.{key}", f"must be >= {minimum}, got {v}")
        return default
    return v


def _boolean(ctx, node, key, path, default):
    if key not in node or node[key] is None:
        return default
    v = node[key]
    if not isinstance(v, bool):
        ctx.error(f"{path}.{key}", f"expected a boolean, got {type(v).__name__}")
        return default
    return v


def _choice(ctx, node, key, path, choices, default):
    if key not in node or node[key] is None:
        return default
    v = node[key]
    if v not in choices:
        ctx.error(f"{path}.{key}", f"must be one of {sorted(choices)}, got {v!r}")
        return default
    return v


def _parse_delay(ctx: _Ctx, node: Any, path: str) -> ShiftedExponential | None:
    d = _expect_mapping(ctx, node, path, ["shift", "rate"])
    shift = _number(ctx, d, "shift", path, minimum=0.0, required=True)
    rate = d.get("rate", 10.0)
    if rate == "inf" or rate == ".inf":
        rate = math.inf
    if isinstance(rate, bool) or not isinstance(rate, (int, float)):
        ctx.error(f"{path}.rate", f"expected a number, got {type(rate).__name__}")
        return None
    if not rate > 0:
        ctx.error(f"{path}.rate", f"must be > 0, got {rate}")
        return None
    if shift is None:
        return None
    return ShiftedExponential(shift=shift, rate=float(rate))


def parse_config_dict(raw: Any) -> ExperimentConfig:
    """Validate a parsed YAML tree; raises ConfigError listing every problem."""
    ctx = _Ctx()
    root = _expect_mapping(
        ctx, raw, "",
        ["topology", "delay", "sync", "objective", "dataset", "training", "seeds", "metrics"],
    )
    if not isinstance(raw, dict):
        raise ConfigError(ctx.errors or ["config root must be a mapping"])

    # topology
    topo = _expect_mapping(ctx, root.get("topology"), "topology", ["groups"])
    groups: list[int] = []
    if "groups" not in topo or topo.get("groups") is None:
        ctx.error("topology.groups", "required key is missing")
    elif not isinstance(topo["groups"], list) or not topo["groups"]:
        ctx.error("topology.groups", "expected a non-empty list of group specs")
    else:
        for j, g in enumerate(topo["groups"]):
            gd = _expect_mapping(ctx, g, f"topology.groups[{j}]", ["clients"])
            n = _integer(ctx, gd, "clients", f"topology.groups[{j}]", minimum=1, required=True)
            groups.append(n if n is not None else 1)

    # delay
    delay = _expect_mapping(ctx, root.get("delay"), "delay", ["group", "global"])
    group_delays: list[ShiftedExponential] = []
    if "group" not in delay or delay.get("group") is None:
        ctx.error("delay.group", "required key is missing")
    elif not isinstance(delay["group"], list):
        ctx.error("delay.group", "expected a list of {shift, rate} specs")
    else:
        for j, d in enumerate(delay["group"]):
            parsed = _parse_delay(ctx, d, f"delay.group[{j}]")
            if parsed is not None:
                group_delays.append(parsed)
        if groups and len(delay["group"]) != len(groups):
            ctx.error(
                "delay.group",
                f"has {len(delay['group'])} entries but topology.groups has {len(groups)}",
            )
    if "global" not in delay or delay.get("global") is None:
        ctx.error("delay.global", "required key is missing")
        global_delay = None
    else:
        global_delay = _parse_delay(ctx, delay["global"], "delay.global")

    # sync
    sync = _expect_mapping(ctx, root.get("sync"), "sync", ["mode", "s", "ramp"])
    mode = _choice(ctx, sync, "mode", "sync", {"fixed", "ramp"}, "fixed")
    schedule: SyncSchedule | None = None
    if mode == "fixed":
        s = _number(ctx, sync, "s", "sync", minimum=0.0, required=True)
        if s is not None:
            schedule = FixedSchedule(s)
    else:
        ramp = _expect_mapping(ctx, sync.get("ramp"), "sync.ramp", ["start", "end", "step"])
        if not ramp:
            ctx.error("sync.ramp", "required for sync.mode = ramp")
        start = _number(ctx, ramp, "start", "sync.ramp", minimum=0.0, required=True)
        end = _number(ctx, ramp, "end", "sync.ramp", minimum=0.0, required=True)
        step = _number(ctx, ramp, "step", "sync.ramp", minimum=0.0, required=True)
        if None not in (start, end, step):
            if end < start:
                ctx.error("sync.ramp.end", f"must be >= start ({start}), got {end}")
            else:
                schedule = RampSchedule(start=start, end=end, step=step)

    # objective
    obj_node = _expect_mapping(ctx, root.get("objective"), "objective", ["kind", "regularization"])
    kind = _choice(ctx, obj_node, "kind", "objective", {"quadratic", "logistic"}, "quadratic")
    reg = _number(ctx, obj_node, "regularization", "objective", default=0.0, minimum=0.0)
    objective = Objective(kind=kind, regularization=reg if reg is not None else 0.0)

    # dataset
    ds_node = _expect_mapping(
        ctx, root.get("dataset"), "dataset",
        ["source", "path", "features", "samples_per_client", "partition", "holdout",
         "noise", "margin", "class_offset", "intercept"],
    )
    source = _choice(ctx, ds_node, "source", "dataset", {"synthetic", "file"}, "synthetic")
    path = ds_node.get("path")
    if source == "file":
        if not isinstance(path, str) or not path:
            ctx.error("dataset.path", "required for dataset.source = file")
    elif path is not None and not isinstance(path, str):
        ctx.error("dataset.path", f"expected a string, got {type(path).__name__}")
    part = _expect_mapping(ctx, ds_node.get("partition"), "dataset.partition", ["mode", "skew"])
    partition_mode = _choice(ctx, part, "mode", "dataset.partition", {"iid", "label_skew"}, "iid")
    dataset = DatasetSpec(
        source=source,
        path=path if isinstance(path, str) else None,
        features=_integer(ctx, ds_node, "features", "dataset", default=5, minimum=1),
        samples_per_client=_integer(
            ctx, ds_node, "samples_per_client", "dataset", default=40, minimum=1
        ),
        partition_mode=partition_mode,
        skew=_number(ctx, part, "skew", "dataset.partition", default=0.0, minimum=0.0, maximum=1.0),
        holdout=_number(ctx, ds_node, "holdout", "dataset", default=0.2, minimum=0.0, maximum=0.9),
        noise=_number(ctx, ds_node, "noise", "dataset", default=0.1, minimum=0.0),
        margin=_number(ctx, ds_node, "margin", "dataset", default=3.0, minimum=0.0),
        class_offset=_number(ctx, ds_node, "class_offset", "dataset", default=0.0, minimum=0.0),
        intercept=_boolean(ctx, ds_node, "intercept", "dataset", default=False),
    )

    # training
    tr = _expect_mapping(
        ctx, root.get("training"), "training",
        ["learning_rate", "total_time", "batch_size", "clip", "init"],
    )
    init_node = _expect_mapping(ctx, tr.get("init"), "training.init", ["kind", "scale"])
    init = InitSpec(
        kind=_choice(ctx, init_node, "kind", "training.init", {"zeros", "gaussian"}, "gaussian"),
        scale=_number(ctx, init_node, "scale", "training.init", default=0.01, minimum=0.0),
    )
    training = TrainingSpec(
        learning_rate=_number(
            ctx, tr, "learning_rate", "training", default=0.05, exclusive_min=0.0
        ),
        total_time=_number(ctx, tr, "total_time", "training", default=100.0, exclusive_min=0.0),
        batch_size=_integer(ctx, tr, "batch_size", "training", default=None, minimum=1,
                            allow_none=True),
        clip=_number(ctx, tr, "clip", "training", default=None, exclusive_min=0.0,
                     allow_none=True),
        init=init,
    )

    # seeds
    seeds_node = root.get("seeds", [0])
    seeds: list[int] = []
    if not isinstance(seeds_node, list) or not seeds_node:
        ctx.error("seeds", "expected a non-empty list of integers")
    else:
        for j, s in enumerate(seeds_node):
            if isinstance(s, bool) or not isinstance(s, int) or s < 0:
                ctx.error(f"seeds[{j}]", f"expected a non-negative integer, got {s!r}")
            else:
                seeds.append(s)

    # metrics
    metrics = _expect_mapping(ctx, root.get("metrics"), "metrics", ["cadence", "loss_floor"])
    cadence = _integer(ctx, metrics, "cadence", "metrics", default=1, minimum=1)
    loss_floor = _number(ctx, metrics, "loss_floor", "metrics", default=None, allow_none=True)

    if ctx.errors:
        raise ConfigError(ctx.errors)

    return ExperimentConfig(
        groups=tuple(groups),
        group_delays=tuple(group_delays),
        global_delay=global_delay,
        schedule=schedule,
        objective=objective,
        dataset=dataset,
        training=training,
        seeds=tuple(seeds),
        metric_cadence=cadence,
        loss_floor=loss_floor,
    )


def parse_config(path: str | Path) -> ExperimentConfig:
    """Load and validate a YAML experiment config file."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    with path.open() as fh:
        raw = yaml.safe_load(fh)
    return parse_config_dict(raw)
