"""Deadline-driven hierarchical federated learning: a deterministic simulator
for wall-clock-budgeted training with per-group stochastic delays, plus
numerical evaluators for its deviation and convergence bounds."""

from .bounds import (
    BoundReport,
    IterationHistory,
    deviation_bound,
    global_convergence_bound,
    group_convergence_bound,
    guarantee_bound,
    kappa,
    max_local_iterations,
    sublinear_step_size,
    sum_squared_indices,
)
from .delays import (
    FixedSchedule,
    LocalIterationCount,
    RampSchedule,
    RngStreams,
    ShiftedExponential,
    SyncSchedule,
    count_local_iterations,
    sync_time_for_round,
)
from .engine import (
    GroupRoundResult,
    GroupSpec,
    HyperParams,
    InitSpec,
    IterationEvent,
    RoundEvent,
    RoundRecord,
    SimulationError,
    SimulationResult,
    Topology,
    global_aggregate,
    local_aggregate,
    local_sgd_step,
    make_upload,
    measure_deviation,
    run_group_round,
    run_simulation,
)
from .objectives import (
    ClientDataset,
    MinibatchSpec,
    ModelVector,
    Objective,
    ProbeSpec,
    SmoothnessConstants,
    accuracy,
    as_model_vector,
    clip_gradient,
    estimate_constants,
    generate_pool,
    generate_synthetic,
    global_gradient,
    global_loss,
    group_gradient,
    group_loss,
    largest_eigenvalue,
    load_csv_dataset,
    partition_pool,
    split_holdout,
)

__version__ = "0.1.0"
