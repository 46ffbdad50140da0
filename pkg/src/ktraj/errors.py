"""Exception types shared across the package."""


class KtrajError(Exception):
    """Base class for package errors."""


class ShapeError(KtrajError, ValueError):
    """Array shapes or lengths are inconsistent."""


class BandError(KtrajError, ValueError):
    """k-space coordinates fall outside the normalized band [-0.5, 0.5]."""


class IntegrationError(KtrajError, RuntimeError):
    """ODE integration failed (step exhaustion or non-finite derivative)."""

    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


class ExportError(KtrajError, OSError):
    """Writing an output file failed."""


class ParseError(KtrajError, ValueError):
    """A file could not be parsed; ``offset`` is the byte offset of the problem."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class UndefinedTestError(KtrajError, ValueError):
    """A statistical test is undefined for the given data."""


class TrainingDivergence(KtrajError, RuntimeError):
    """Training produced a non-finite loss."""


class ConfigError(KtrajError, ValueError):
    """Invalid configuration key or value."""
