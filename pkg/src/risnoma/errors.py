"""Exception taxonomy shared by all risnoma modules.

The CLI maps these onto exit codes: configuration/usage problems exit
with 2, file-format problems with 3, numerical/training failures with 4.
"""


class RisnomaError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(RisnomaError):
    """Invalid configuration: bad shapes, dimensions, or option values."""


class UsageError(RisnomaError):
    """API or CLI misuse (e.g. differentiating a non-scalar output)."""


class FormatError(RisnomaError):
    """Malformed dataset/checkpoint/report file."""


class DegenerateInputError(RisnomaError):
    """Numerically degenerate input (rank-deficient or zero-norm channels)."""


class NotQuasiDegraded(RisnomaError):
    """Strict-mode precoding was asked for a channel that fails the
    quasi-degradation test.  Carries the offending report."""

    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


class TrainingError(RisnomaError):
    """Training failure (non-finite gradient, broken state)."""
