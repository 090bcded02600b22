"""Phenotyper - temporal phenotyping from longitudinal coded-event data."""

from .cohort import Cohort, load_cohort, save_cohort
from .config import PipelineConfig, load_pipeline_config
from .errors import PhenotyperError
from .pipeline import report, run_pipeline
from .synthetic import generate_synthetic

__all__ = [
    "Cohort",
    "PhenotyperError",
    "PipelineConfig",
    "generate_synthetic",
    "load_cohort",
    "load_pipeline_config",
    "report",
    "run_pipeline",
    "save_cohort",
]
