"""Exception hierarchy shared across the package.

Two top-level families matter for the CLI exit code: `InputError` (bad
data or configuration, exit 1) and `SolverError` (a numerical routine
failed, exit 2). Everything else derives from one of those.
"""


class OaslamError(Exception):
    """Base class for all package errors."""


class InputError(OaslamError):
    """Rejected input: bad values, malformed files, bad configuration."""


class ConfigError(InputError):
    """Invalid or inconsistent run configuration."""


class ParseError(InputError):
    """A data file failed to parse; carries path and 1-based line number."""

    def __init__(self, path: str, line: int, message: str):
        super().__init__(f"{path}:{line}: {message}")
        self.path = path
        self.line = line


class OutOfFovError(InputError):
    """A bearing outside the sonar field of view (distinct from a no-return)."""


class DegenerateEmbeddingError(InputError):
    """Zero or non-finite embedding vector where a valid one is required."""


class GatingError(OaslamError):
    """Mahalanobis gate could not be evaluated (non-PD covariance)."""


class HeadingUndefinedError(InputError):
    """Heading requested at a geometry where it is undefined."""


class EmptyDatasetError(InputError):
    """Dataset contains no usable events."""


class SolverError(OaslamError):
    """A numerical solver failed to produce a usable answer."""


class OptimizationFailure(SolverError):
    """Nonlinear least squares could not make progress (singular system)."""


class CovarianceUnavailable(SolverError):
    """Marginal covariance requested from a rank-deficient information matrix."""
