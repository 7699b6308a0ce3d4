"""Reverse-mode autodiff engine: tensors, a recorded-op graph, the
operator set needed by the ECG network, and the Adam optimizer."""

from . import kernels, ops
from .optim import AdamState, adam_step
from .tensor import Graph, Tensor

__all__ = ["Graph", "Tensor", "AdamState", "adam_step", "ops", "kernels"]
