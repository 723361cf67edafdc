"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Invalid inputs, configs, geometry, or file schemas (CLI exit code 2)."""


class SolverFailure(RuntimeError):
    """A numerical solve failed or diverged (CLI exit code 3)."""
