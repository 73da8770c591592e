"""Exception types shared across the library."""


class GflowError(Exception):
    """Base class for library errors."""


class ShapeError(GflowError):
    """Operands have incompatible shapes."""


class ContractError(GflowError):
    """An operation was called outside its contract (e.g. non-scalar backward root)."""


class MaskError(GflowError):
    """A mask row excludes every entry."""


class NumericFault(GflowError):
    """NaN or infinity appeared where finite values are required."""


class EnumerationLimit(GflowError):
    """State enumeration would exceed the configured cap."""


class ConfigError(GflowError):
    """Invalid run configuration."""
