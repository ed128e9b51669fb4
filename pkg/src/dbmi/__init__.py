"""Mutual information between discrete random vectors via discrete bridge matching."""

from .core import (
    Coupling,
    InfeasibleBridgeError,
    InfiniteKLError,
    NumericError,
    StateSpace,
    TimeGrid,
    ValidationError,
    make_rng,
)

__version__ = "0.1.0"

__all__ = [
    "Coupling",
    "InfeasibleBridgeError",
    "InfiniteKLError",
    "NumericError",
    "StateSpace",
    "TimeGrid",
    "ValidationError",
    "make_rng",
    "__version__",
]
