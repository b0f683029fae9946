"""Optical bistability of Lambda-type atoms in a driven cavity."""

from .model import (
    PhysicalParams,
    SemiclassicalState,
    bloch_rhs,
    cooperativity,
    cooperativity_to_g,
    ground_state,
    transmission_norm,
    with_cooperativity,
)

__version__ = "0.1.0"

__all__ = [
    "PhysicalParams",
    "SemiclassicalState",
    "bloch_rhs",
    "cooperativity",
    "cooperativity_to_g",
    "ground_state",
    "transmission_norm",
    "with_cooperativity",
    "__version__",
]
