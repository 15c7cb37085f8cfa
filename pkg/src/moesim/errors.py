"""Exception types shared across the simulator."""


class SimError(Exception):
    """Base class for simulator errors."""


class ConfigurationError(SimError):
    """Invalid or inconsistent configuration input."""


class ShapeError(SimError):
    """Matrix or tile dimensions violate an operation's contract."""


class UnsupportedModeError(SimError):
    """Requested dataflow or mode not available on the target array."""


class CapacityError(SimError):
    """Model or working set does not fit the configured memories."""


class MetricsError(SimError):
    """Metric requested from an empty or inconsistent measurement set."""


class SchedulingError(SimError):
    """Dependency or resource bookkeeping violation inside the engine."""
