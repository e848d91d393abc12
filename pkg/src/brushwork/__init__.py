"""Differentiable brush painting: an artist network, a stroke medium, and style-driven variations."""
from .tensor import Tensor, backward, leaf, no_grad, straight_thru, stop_grad

__version__ = "0.1.0"
__all__ = ["Tensor", "backward", "leaf", "no_grad", "straight_thru", "stop_grad"]
