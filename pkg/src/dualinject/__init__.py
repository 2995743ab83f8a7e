"""Tuning-free one-step personalization on a numpy autodiff core, at desk scale."""

from .tensor import ContractError, ShapeError, Tensor

__all__ = ["ContractError", "ShapeError", "Tensor"]
__version__ = "0.1.0"
