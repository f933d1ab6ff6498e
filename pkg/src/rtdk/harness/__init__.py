from .config import ExperimentConfig, ObjectiveSpec
from .runner import (
    RegretRecord,
    run_ablation,
    run_evaluation,
    run_experiment,
    run_pretraining,
)
from .report import emit_report

__all__ = [
    "ExperimentConfig",
    "ObjectiveSpec",
    "RegretRecord",
    "emit_report",
    "run_ablation",
    "run_evaluation",
    "run_experiment",
    "run_pretraining",
]
