"""Exception hierarchy shared across the package."""


class AdiagError(Exception):
    """Base class for all package errors."""


class DimensionError(AdiagError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(AdiagError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(AdiagError, ValueError):
    """Invalid configuration value or combination of values."""


class DomainError(AdiagError, ValueError):
    """Input lies outside the domain of a function."""


class ValidationError(AdiagError, ValueError):
    """A data object violates one of its invariants."""


class FormatError(AdiagError):
    """A binary file could not be decoded."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class InconsistentFileError(FormatError):
    pass


class DivergenceError(AdiagError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"loss became non-finite at epoch {epoch}")
