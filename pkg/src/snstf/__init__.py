"""Simulation and finite-key analysis of sending-or-not-sending twin-field QKD."""
from .domain import (
    ChannelModel,
    CountLedger,
    InsufficientStatistics,
    KeyRateReport,
    ProtocolParams,
    SecurityParams,
    ValidationError,
    binary_entropy,
    validate,
)
from .keyrate import analyze, key_rate, plob_bound

__all__ = [
    "ChannelModel",
    "CountLedger",
    "InsufficientStatistics",
    "KeyRateReport",
    "ProtocolParams",
    "SecurityParams",
    "ValidationError",
    "analyze",
    "binary_entropy",
    "key_rate",
    "plob_bound",
    "validate",
]

__version__ = "0.1.0"
