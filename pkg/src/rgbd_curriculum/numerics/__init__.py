"""Tensor algebra with reverse-mode autodiff, seeded RNG and a gradient oracle."""

from . import ops
from .gradcheck import analytic_gradients, finite_difference_check, relative_error
from .rng import SeededRng, sample_gaussian
from .tensor import (
    ComputationTape,
    ContractError,
    DimensionError,
    NumericError,
    Tensor,
    apply_primitive,
    backward,
    current_tape,
    get_dtype,
    no_tape,
    precision,
    registered_kinds,
    set_precision,
)

__all__ = [
    "ComputationTape",
    "ContractError",
    "DimensionError",
    "NumericError",
    "SeededRng",
    "Tensor",
    "analytic_gradients",
    "apply_primitive",
    "backward",
    "current_tape",
    "finite_difference_check",
    "get_dtype",
    "no_tape",
    "ops",
    "precision",
    "registered_kinds",
    "relative_error",
    "sample_gaussian",
    "set_precision",
]
