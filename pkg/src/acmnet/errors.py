"""Exception types shared across the package."""


class AcmError(Exception):
    """Base class for all package errors."""


class ParameterError(AcmError, ValueError):
    """An argument or configuration value is invalid."""


class DomainError(AcmError, ValueError):
    """A numeric input is outside the domain of the operation."""


class DegenerateBatchError(ParameterError):
    """The batch is too small for the contrastive denominator to be defined."""


class LoadError(AcmError, OSError):
    """A dataset directory could not be read."""


class FormatError(AcmError, ValueError):
    """A binary container (checkpoint or bank) is malformed."""


class MismatchError(AcmError, ValueError):
    """Model, bank and data disagree on shape or dimension."""


class NumericalError(AcmError, RuntimeError):
    """A non-finite value appeared during training."""
