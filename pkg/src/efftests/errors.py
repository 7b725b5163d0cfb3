"""Exception types shared across the package.

The split matters for the CLI exit codes: problems with user-supplied
data map to exit 2, numerical failures (non-positive-definite matrices,
solver breakdown, non-convergence) map to exit 3.
"""


class EffTestsError(Exception):
    """Base class for package-specific errors."""


class DataError(EffTestsError):
    """Malformed or inconsistent input data (files, matrices, datasets)."""


class NumericalError(EffTestsError):
    """A numerical procedure failed or produced an unusable result."""


class NotPositiveDefiniteError(NumericalError):
    """A matrix required to be positive definite is not."""
