"""Configuration, experiment orchestration and result emission."""

from .config import ConfigError, ExperimentConfig, load_config
from .experiment import (
    SCHEMA_VERSION,
    ComparisonTable,
    ExperimentResult,
    RunResult,
    build_task,
    compare_methods,
    emit_results,
    load_summary,
    run_experiment,
)
