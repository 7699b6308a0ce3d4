"""Tensor values and the recorded-operation graph for reverse-mode autodiff.

A Graph is a tape: operations append themselves in execution order and
backward walks the exact reverse of that order, accumulating gradients
into every tensor that requires them. Graphs are per-thread; running
one graph instance is single-threaded by design.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from ..errors import GraphCycle, NonFiniteValue, NonScalarLoss

_DTYPES = (np.float32, np.float64)


class Tensor:
    """Shape + float buffer with an optional gradient of the same shape."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.ascontiguousarray(data, dtype=dtype)
        if arr.dtype.type not in _DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, delta: np.ndarray):
        if self.grad is None:
            self.grad = delta.astype(self.data.dtype, copy=True)
        else:
            self.grad += delta

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class _GraphStack(threading.local):
    def __init__(self):
        self.stack: list["Graph"] = []


_graphs = _GraphStack()


class Graph:
    """Tape of recorded operations, replayed in reverse for backward."""

    def __init__(self):
        self._entries: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._produced: set[int] = set()

    def __enter__(self) -> "Graph":
        _graphs.stack.append(self)
        return self

    def __exit__(self, *exc):
        popped = _graphs.stack.pop()
        assert popped is self

    @staticmethod
    def active() -> "Graph | None":
        return _graphs.stack[-1] if _graphs.stack else None

    def __len__(self):
        return len(self._entries)

    def record(self, out: Tensor, parents: Sequence[Tensor], backward_fn: Callable):
        """Append one operation; backward_fn(dy) returns per-parent grads.

        Entries must form a valid forward order: an output may be produced
        once and may not be its own input.
        """
        if id(out) in self._produced:
            raise GraphCycle("tensor produced by more than one recorded operation")
        if any(parent is out for parent in parents):
            raise GraphCycle("operation consumes its own output")
        self._produced.add(id(out))
        self._entries.append((out, tuple(parents), backward_fn))

    def backward(self, loss: Tensor):
        """Chain-rule sweep in exact reverse recording order."""
        if loss.size != 1:
            raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
        if id(loss) not in self._produced:
            raise ValueError("loss is not an output of this graph")
        loss.grad = np.ones_like(loss.data)
        for out, parents, backward_fn in reversed(self._entries):
            if out.grad is None:
                continue
            grads = backward_fn(out.grad)
            for parent, grad in zip(parents, grads):
                if grad is None or not parent.requires_grad:
                    continue
                parent.accumulate_grad(grad)


def record_op(out: Tensor, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Finish an op: check finiteness, then record on the active graph (if any)."""
    if not np.isfinite(out.data).all():
        raise NonFiniteValue("operation produced NaN or Inf")
    out.requires_grad = any(p.requires_grad for p in parents)
    graph = Graph.active()
    if graph is not None and out.requires_grad:
        graph.record(out, parents, backward_fn)
    return out
