"""Exception types shared across the pipeline."""


class DegenerateInputError(ValueError):
    """Input is geometrically degenerate (zero-length vector, non-positive depth)."""


class ConfigurationError(ValueError):
    """A parameter set violates its invariants."""


class SyncError(ValueError):
    """Measurements that must be simultaneous are too far apart in time."""


class ConditioningError(RuntimeError):
    """A GP system could not be factorized even after jitter retries."""


class EmptyMapError(RuntimeError):
    """No occupied voxel falls inside the evaluation bounds."""


class DataError(IOError):
    """A data file is missing, truncated or malformed."""
