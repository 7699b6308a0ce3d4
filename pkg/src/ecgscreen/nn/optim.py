"""Adam optimizer with bias-corrected first and second moments."""

from __future__ import annotations

import numpy as np

from ..errors import NonFiniteValue, ShapeMismatch
from .tensor import Tensor


class AdamState:
    """Per-parameter moment buffers plus the shared step counter."""

    def __init__(self, params: list[Tensor], lr: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out


def adam_step(state: AdamState, grads: list[np.ndarray] | None = None) -> None:
    """One update: moments decay toward the gradient, parameters move by
    lr * m_hat / (sqrt(v_hat) + eps) with bias correction 1 - beta^t.

    Gradients default to each parameter's accumulated .grad.
    """
    if grads is None:
        grads = [p.grad for p in state.params]
    if len(grads) != len(state.params):
        raise ShapeMismatch("gradient list length does not match parameters")
    state.t += 1
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(state.params, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeMismatch(f"gradient shape {g.shape} != parameter shape {p.data.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteValue("non-finite gradient passed to adam_step")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        m_hat = m / correction1
        v_hat = v / correction2
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
