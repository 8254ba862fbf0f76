"""Exception types shared across the package."""


class ExConError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(ExConError):
    """Invalid configuration: bad field values, unknown keys, shape mismatches."""


class ContractViolation(ExConError):
    """An input violates a documented precondition (e.g. non-unit rows)."""


class DegenerateEmbeddingError(ExConError):
    """A vector with (near-)zero norm cannot be normalized onto the unit sphere."""


class BatchTooSmallError(ExConError):
    """A contrastive batch needs at least two anchors."""


class NoPositivesError(ExConError):
    """An anchor has an empty positive set under a policy that forbids it."""


class NonFiniteLossError(ExConError):
    """Training produced a NaN/Inf loss; carries a diagnostic snapshot."""

    def __init__(self, message: str, snapshot: dict | None = None):
        super().__init__(message)
        self.snapshot = snapshot or {}
