"""
Phenotyper error hierarchy.

Library code raises these; only the CLI turns them into exit codes.
"""

from __future__ import annotations

from typing import Any


class PhenotyperError(Exception):
    """Base class for every error raised by the phenotyper package."""


class IngestionError(PhenotyperError):
    """A cohort file could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class CohortValidationError(PhenotyperError):
    """A parsed cohort violates the data-model invariants."""


class ConfigError(PhenotyperError):
    """A configuration value is missing, out of range or inconsistent."""


class ConvergenceError(PhenotyperError):
    """An iterative solver did not reach its tolerance."""


class SeparationError(ConvergenceError):
    """Logistic MLE does not exist because the classes are completely separated."""


class TrainingError(PhenotyperError):
    """Optimization produced a non-finite or diverging loss."""

    def __init__(self, message: str, trace: Any = None):
        self.trace = trace
        super().__init__(message)


class PipelineError(PhenotyperError):
    """A pipeline stage failed; partial artifacts are kept on disk."""

    def __init__(self, message: str, stage: str | None = None):
        self.stage = stage
        super().__init__(message)


class ReportError(PhenotyperError):
    """An artifact directory cannot be summarised."""

    def __init__(self, message: str, path: Any = None):
        self.path = path
        super().__init__(message)
