"""Small neural-network building blocks shared by the backbone and contour head.

Everything here is float64 numpy with hand-written backward passes. Parameters
live in plain arrays owned by the model objects; :func:`flatten_arrays` and
:func:`write_flat` convert between that layout and the single flat vector used
by the optimizer and the finite-difference checker.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


def uniform_fan_in_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """Uniform weights in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
    if fan_in <= 0:
        raise ValueError(f"fan_in must be positive, got {fan_in}")
    bound = 1.0 / np.sqrt(float(fan_in))
    return rng.uniform(-bound, bound, size=shape)


def flatten_arrays(arrays: list[np.ndarray]) -> np.ndarray:
    if not arrays:
        return np.zeros(0)
    return np.concatenate([np.asarray(a, dtype=np.float64).ravel() for a in arrays])


def write_flat(vector: np.ndarray, arrays: list[np.ndarray]) -> None:
    """Scatter a flat vector back into the given arrays, in place."""
    vector = np.asarray(vector, dtype=np.float64).ravel()
    total = sum(a.size for a in arrays)
    if vector.size != total:
        raise ShapeError(f"flat vector has {vector.size} entries, parameters need {total}")
    pos = 0
    for a in arrays:
        a[...] = vector[pos : pos + a.size].reshape(a.shape)
        pos += a.size


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, gy: np.ndarray) -> np.ndarray:
    return np.where(x > 0.0, gy, 0.0)


def sigmoid(x: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(y: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Gradient through sigmoid given its output y."""
    return gy * y * (1.0 - y)


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise affine map: (n, d_in) @ (d_in, d_out) + b."""
    if x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense input dim {x.shape[1]} != weight dim {w.shape[0]}")
    return x @ w + b


def dense_backward(x: np.ndarray, w: np.ndarray, gy: np.ndarray):
    gx = gy @ w.T
    gw = x.T @ gy
    gb = gy.sum(axis=0)
    return gx, gw, gb


@dataclass
class Standardization:
    """Per-feature affine normalization with statistics frozen after calibration.

    Applies (x - mean) * inv_std feature-wise. Not trainable; the statistics
    are set once (identity by default, or from a calibration batch) and then
    treated as constants by every gradient computation.
    """

    mean: np.ndarray
    inv_std: np.ndarray

    @classmethod
    def identity(cls, dim: int) -> "Standardization":
        return cls(mean=np.zeros(dim), inv_std=np.ones(dim))

    @classmethod
    def from_batch(cls, x: np.ndarray, std_floor: float = 1e-3) -> "Standardization":
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        return cls(mean=mean, inv_std=1.0 / np.maximum(std, std_floor))

    @property
    def dim(self) -> int:
        return int(self.mean.shape[0])

    def apply(self, x: np.ndarray) -> np.ndarray:
        if x.shape[1] != self.dim:
            raise ShapeError(f"standardization dim {self.dim} != input dim {x.shape[1]}")
        return (x - self.mean) * self.inv_std

    def backward(self, gy: np.ndarray) -> np.ndarray:
        return gy * self.inv_std
