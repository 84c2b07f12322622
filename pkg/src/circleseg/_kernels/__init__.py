"""Hot numeric kernels: a compiled core with a numpy fallback.

The compiled extension (``circleseg._kernels._native``, built from Cython) is
selected at import time when present; otherwise the numpy implementation is
used. The choice can be forced with the ``CIRCLESEG_KERNELS`` environment
variable (``native`` or ``python``) or switched at runtime with
:func:`set_backend`, which the benchmark in ``benchmarks/`` relies on.

Both backends implement the same four functions with identical semantics:
``conv2d_forward``, ``conv2d_backward``, ``circular_conv_forward``,
``circular_conv_backward``.
"""

from __future__ import annotations

import os

import numpy as np

from . import _numpy as _python_backend

_BACKENDS = {"python": _python_backend}

try:
    from . import _native as _native_backend

    _BACKENDS["native"] = _native_backend
except ImportError:
    _native_backend = None


def _initial_backend() -> str:
    requested = os.environ.get("CIRCLESEG_KERNELS", "").strip().lower()
    if requested:
        if requested not in _BACKENDS:
            raise ImportError(
                f"CIRCLESEG_KERNELS={requested!r} but available backends are "
                f"{sorted(_BACKENDS)}"
            )
        return requested
    return "native" if "native" in _BACKENDS else "python"


_active_name = _initial_backend()


def available_backends() -> tuple[str, ...]:
    return tuple(sorted(_BACKENDS))


def active_backend() -> str:
    return _active_name


def set_backend(name: str) -> None:
    global _active_name
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; available: {sorted(_BACKENDS)}")
    _active_name = name


def _c64(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


def conv2d_forward(x, w, b, stride: int = 1, pad: int = 0) -> np.ndarray:
    return _BACKENDS[_active_name].conv2d_forward(_c64(x), _c64(w), _c64(b), stride, pad)


def conv2d_backward(x, w, gy, stride: int = 1, pad: int = 0, need_gx: bool = True):
    return _BACKENDS[_active_name].conv2d_backward(
        _c64(x), _c64(w), _c64(gy), stride, pad, need_gx
    )


def circular_conv_forward(f, k) -> np.ndarray:
    return _BACKENDS[_active_name].circular_conv_forward(_c64(f), _c64(k))


def circular_conv_backward(f, k, gy):
    return _BACKENDS[_active_name].circular_conv_backward(_c64(f), _c64(k), _c64(gy))
