"""Exception types shared across the package."""


class LatentBankError(Exception):
    """Base class for all package errors."""


class InvalidArgument(LatentBankError, ValueError):
    pass


class FormatError(LatentBankError):
    """A persisted file (weights, bank, artifact) is malformed."""


class CompatibilityError(LatentBankError):
    """An artifact was produced for a different model or schema version."""


class InvalidPlan(LatentBankError, ValueError):
    pass


class ConfigurationError(LatentBankError, ValueError):
    pass


class EmptyBankError(LatentBankError, ValueError):
    """Descriptor span selected no token positions."""
