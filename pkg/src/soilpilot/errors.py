"""Exception types shared across the pipeline."""


class SoilPilotError(Exception):
    """Base class for all package-specific errors."""


class InsufficientDataError(SoilPilotError):
    """Too few usable samples for the requested operation."""


class DegenerateDataError(SoilPilotError):
    """Input is constant (or otherwise rank-deficient) where variation is required."""


class ForecastError(SoilPilotError):
    """A forecast could not be produced for this sensor/window."""
