"""Exception types raised across the package."""


class SsattnError(Exception):
    """Base class for all package errors."""


class ShapeError(SsattnError, ValueError):
    """Operand extents are incompatible with the operation."""


class DomainError(SsattnError, ValueError):
    """An input lies outside the mathematical domain of an operation."""


class ConfigError(SsattnError, ValueError):
    """A configuration value is out of its allowed range."""
