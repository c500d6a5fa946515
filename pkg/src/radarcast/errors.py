"""Exception types shared across the package."""


class RadarcastError(Exception):
    """Base class for errors raised by this package."""


class DataError(RadarcastError):
    """Malformed, inconsistent, or insufficient input data."""


class ConfigError(RadarcastError):
    """A configuration key is unknown or outside its allowed range."""


class EstimationError(RadarcastError):
    """An estimation step cannot produce a result (degenerate inputs,
    singular normal equations, empty search interval)."""


class NotPositiveDefinite(RadarcastError):
    """A matrix required to be symmetric positive definite is not."""
