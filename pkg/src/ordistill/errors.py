"""Exception types shared across the package."""


class OrdistillError(Exception):
    """Base class for all package errors."""


class ShapeError(OrdistillError):
    """Operand shapes are incompatible with the requested operation."""


class NumericError(OrdistillError):
    """A forward or backward pass produced NaN or Inf."""


class ContractError(OrdistillError):
    """An API precondition was violated (wrong stage, non-scalar loss, ...)."""


class ConfigError(OrdistillError):
    """A configuration value is invalid or inconsistent."""


class DataFormatError(OrdistillError):
    """A file on disk does not match its expected format."""


class ArtifactError(OrdistillError):
    """A checkpoint or other stored artifact is corrupt."""
