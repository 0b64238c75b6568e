"""Configuration, experiment orchestration, and CSV emission."""

from .config import (
    BuiltData,
    ConfigError,
    DatasetSpec,
    ExperimentConfig,
    SweepSpec,
    TrainingSpec,
    parse_config,
    parse_config_dict,
)
from .experiments import (
    RunOutput,
    fairness_experiment,
    measure_deviation,
    run_experiment,
    run_sweep,
    schedule_experiment,
)
