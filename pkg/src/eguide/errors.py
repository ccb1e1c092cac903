"""Exception types shared across the toolkit."""


class EguideError(Exception):
    """Base class for all toolkit errors."""


class DomainError(EguideError):
    """Query point outside the physical domain (e.g. on or below the chip plane)."""


class GeometryError(EguideError):
    """Invalid electrode geometry (degenerate, self-intersecting, overlapping...)."""


class ConvergenceError(EguideError):
    """An iterative solver failed to converge; carries diagnostic data."""

    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class ConfigError(EguideError):
    """Invalid run configuration."""
