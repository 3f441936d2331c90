"""Typed synchronous client for the factreward reward service."""

__version__ = "0.1.0"

from .client import (  # noqa: F401
    AuthError,
    BatchItemError,
    ClientConfig,
    FactualityScore,
    HealthStatus,
    NetworkError,
    RewardBreakdown,
    RewardClient,
    RewardClientError,
    SchemaMismatchError,
    ServerError,
)
