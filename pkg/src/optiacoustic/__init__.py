"""Opti-acoustic sensor fusion and confidence-weighted GP occupancy mapping."""

from .errors import (
    ConditioningError,
    ConfigurationError,
    DataError,
    DegenerateInputError,
    EmptyMapError,
    SyncError,
)

__version__ = "0.1.0"
