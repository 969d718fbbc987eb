"""Config-driven experiment orchestration and report emission."""

from .config import OUTPUT_ROOT_ENV, ExperimentConfig, load_config
from .experiments import RUNNERS, ResultRow, ResultTable, build_dataset, run_experiment
from .report import emit_report, read_results_csv, stats_table, summary_text, write_results_csv

__all__ = [
    "OUTPUT_ROOT_ENV",
    "ExperimentConfig",
    "load_config",
    "RUNNERS",
    "ResultRow",
    "ResultTable",
    "build_dataset",
    "run_experiment",
    "emit_report",
    "read_results_csv",
    "stats_table",
    "summary_text",
    "write_results_csv",
]
