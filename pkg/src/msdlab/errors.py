"""Exception types shared across the package.

The CLI maps these onto process exit codes, so the taxonomy is part of
the public contract: configuration and input problems are distinct from
mathematical gate failures, which are distinct from non-convergence.
"""


class MsdlabError(Exception):
    """Base class for all package errors."""


class ExpressionError(MsdlabError):
    """A coefficient expression failed to parse or evaluate."""


class DomainError(MsdlabError):
    """A time argument lies outside the interval of definition."""


class AbsentCoefficientError(MsdlabError):
    """A coefficient matrix was requested but not specified."""


class GridError(MsdlabError):
    """A simulation grid is inconsistent (node alignment, step sign)."""


class ArgumentError(MsdlabError):
    """Arguments violate an operation's ordering or range contract."""


class UnderdeterminedError(MsdlabError):
    """Envelope fit data cannot pin down the parameters."""


class FitError(MsdlabError):
    """Envelope fitting failed for a reason other than identifiability."""


class ConditionError(MsdlabError):
    """A smallness condition required by a robustness theorem fails."""


class ConvergenceError(MsdlabError):
    """An iteration was stopped without meeting its tolerance."""


class TruncationError(MsdlabError):
    """The truncation horizon is too short for the requested tolerance."""

    def __init__(self, message: str, required_horizon: float | None = None):
        super().__init__(message)
        self.required_horizon = required_horizon


class ConstructionError(MsdlabError):
    """A constructed projection family failed its audit."""


class GluingError(MsdlabError):
    """Gluing two half-line projections failed an invertibility audit."""


class ConfigError(MsdlabError):
    """An experiment configuration file is invalid."""
