"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand extents are incompatible with an operation."""


class ContractError(ValueError):
    """A documented precondition of a call was violated."""


class ConfigError(ValueError):
    """A configuration value is invalid or inconsistent."""


class FormatError(ValueError):
    """A serialized file is malformed, truncated, or of the wrong version."""


class TrainingError(RuntimeError):
    """Training produced an unrecoverable state (e.g. a non-finite loss)."""
