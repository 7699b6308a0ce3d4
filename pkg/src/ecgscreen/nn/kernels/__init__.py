"""Kernel backend selection.

The compiled Cython extension is preferred when it imported cleanly;
otherwise the NumPy implementations take over. ECGSCREEN_BACKEND forces
the choice: "compiled", "numpy", or "auto" (default).
"""

from __future__ import annotations

import os
import warnings

from ...errors import ConfigError
from . import numpy_backend

try:
    from . import _convkernels as _compiled
except ImportError:  # pragma: no cover - build-env dependent
    _compiled = None

_choice = os.environ.get("ECGSCREEN_BACKEND", "auto").lower()
if _choice in ("auto", ""):
    _impl = _compiled if _compiled is not None else numpy_backend
elif _choice in ("compiled", "c"):
    if _compiled is None:
        raise ConfigError("ECGSCREEN_BACKEND=compiled but the extension is not built")
    _impl = _compiled
elif _choice in ("numpy", "py"):
    _impl = numpy_backend
else:
    raise ConfigError(f"unknown ECGSCREEN_BACKEND value: {_choice!r}")

if _impl is numpy_backend and _choice in ("auto", ""):  # pragma: no cover
    warnings.warn("compiled kernels unavailable; using the slower NumPy backend")

BACKEND = "compiled" if _impl is not numpy_backend else "numpy"

conv_out_len = numpy_backend.conv_out_len


def conv1d_forward(x, w, stride, pad):
    return _impl.conv1d_forward(x, w, stride, pad)


def conv1d_backward(x, w, dy, stride, pad, need_dx=True, need_dw=True):
    return _impl.conv1d_backward(x, w, dy, stride, pad, need_dx, need_dw)


def maxpool1d_forward(x, k, stride, ceil_mode=False):
    return _impl.maxpool1d_forward(x, k, stride, ceil_mode)


def maxpool1d_backward(idx, dy, t):
    return _impl.maxpool1d_backward(idx, dy, t)


def get_backend(name: str):
    """Return a specific backend module, for parity tests and benchmarks."""
    if name == "numpy":
        return numpy_backend
    if name == "compiled":
        if _compiled is None:
            raise ConfigError("compiled kernel extension is not built")
        return _compiled
    raise ConfigError(f"unknown backend {name!r}")
