"""Belief-guided dual-encoder image-text retrieval at desk scale."""

from .tensor import Tensor, grad_check, no_grad

__all__ = ["Tensor", "grad_check", "no_grad"]

__version__ = "0.1.0"
