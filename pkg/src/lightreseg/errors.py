"""Exception hierarchy shared by every subpackage."""


class LightReSegError(Exception):
    """Base class for all package errors."""


class DimensionError(LightReSegError, ValueError):
    """Operand shapes are incompatible."""


class ShapeError(DimensionError):
    """Spatial extents violate a divisibility or size contract."""


class ConfigError(LightReSegError, ValueError):
    """A configuration value is invalid or inconsistent."""


class DataError(LightReSegError, ValueError):
    """Input data (masks, images, class indices) is malformed."""


class CheckpointError(LightReSegError, ValueError):
    """A checkpoint file cannot be loaded."""


class NonFiniteError(LightReSegError, FloatingPointError):
    """A NaN or Inf appeared while finite-value checking was enabled."""
