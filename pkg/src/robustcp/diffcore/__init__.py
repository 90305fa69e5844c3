"""Minimal reverse-mode differentiation over dense float64 arrays."""

from . import ops
from .numeric import finite_difference_gradient, sigmoid
from .tape import GradientResult, Node, ShapeError, Tape, TapeError, as_tensor, backward, forward

__all__ = [
    "GradientResult",
    "Node",
    "ShapeError",
    "Tape",
    "TapeError",
    "as_tensor",
    "backward",
    "finite_difference_gradient",
    "forward",
    "ops",
    "sigmoid",
]
