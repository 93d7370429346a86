"""Uncertainty-ranked sparse sampling attention for image deraining, on a small numpy autodiff core."""

from .errors import ConfigError, DomainError, ShapeError, SsattnError

__all__ = ["ConfigError", "DomainError", "ShapeError", "SsattnError"]
__version__ = "0.1.0"
