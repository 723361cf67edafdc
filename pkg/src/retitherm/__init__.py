"""Retinal laser heating: models, reduction, and state/parameter estimation."""

__version__ = "0.1.0"

from .errors import SolverFailure, ValidationError

__all__ = ["SolverFailure", "ValidationError", "__version__"]
