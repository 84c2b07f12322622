"""Dense float64 grids, bilinear sampling, and a finite-difference gradient checker.

Every dense map in the package (images, heatmaps, offset and radius maps,
feature maps) is a :class:`Grid2D`: a ``(height, width, channels)`` float64
array in row-major ``(y, x, c)`` order. All numeric code works in 64-bit
arithmetic so that gradient checks are not confounded by precision.
"""

from __future__ import annotations

import io
from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from .errors import CoordinateRangeError, EvaluationError, ShapeError


class Grid2D:
    """A dense (height, width, channels) float64 grid.

    Grids are value types: operations return new grids and never mutate
    their inputs. Construction validates that every value is finite.
    """

    __slots__ = ("values",)

    def __init__(self, values):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, np.newaxis]
        if arr.ndim != 3:
            raise ShapeError(f"grid values must be 2-D or 3-D, got ndim={arr.ndim}")
        if arr.size == 0:
            raise ShapeError("grid must have at least one cell")
        if not np.all(np.isfinite(arr)):
            raise ValueError("grid values must be finite")
        self.values = arr

    @classmethod
    def zeros(cls, width: int, height: int, channels: int = 1) -> "Grid2D":
        return cls(np.zeros((height, width, channels)))

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[2]

    def copy(self) -> "Grid2D":
        return Grid2D(self.values.copy())

    def __eq__(self, other) -> bool:
        if not isinstance(other, Grid2D):
            return NotImplemented
        return self.values.shape == other.values.shape and bool(
            np.array_equal(self.values, other.values)
        )

    def __repr__(self) -> str:
        return f"Grid2D(width={self.width}, height={self.height}, channels={self.channels})"

    def to_bytes(self) -> bytes:
        """Serialize to the numpy ``.npy`` container (exact float64 payload)."""
        buf = io.BytesIO()
        np.save(buf, self.values, allow_pickle=False)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Grid2D":
        arr = np.load(io.BytesIO(blob), allow_pickle=False)
        return cls(arr)


@dataclass(frozen=True)
class GridSpec:
    """Geometry linking an input image to its down-sampled prediction grid."""

    input_width: int
    input_height: int
    downsample: int = 4
    classes: int = 1

    def __post_init__(self):
        if self.downsample < 1:
            raise ValueError(f"downsample must be >= 1, got {self.downsample}")
        if self.classes < 1:
            raise ValueError(f"classes must be >= 1, got {self.classes}")
        if self.input_width % self.downsample or self.input_height % self.downsample:
            raise ValueError(
                f"input dims {self.input_width}x{self.input_height} not divisible "
                f"by downsample factor {self.downsample}"
            )

    @property
    def grid_width(self) -> int:
        return self.input_width // self.downsample

    @property
    def grid_height(self) -> int:
        return self.input_height // self.downsample


def bilinear_sample(grid: Grid2D, x: float, y: float, channel: int = 0) -> float:
    """Bilinearly interpolate one channel of ``grid`` at continuous (x, y).

    Coordinates are in grid cells; (0, 0) is the first cell and
    (width-1, height-1) the last. Exact cell coordinates return the stored
    value. Out-of-range coordinates raise :class:`CoordinateRangeError`.
    """
    w, h = grid.width, grid.height
    if not (0.0 <= x <= w - 1 and 0.0 <= y <= h - 1):
        raise CoordinateRangeError(
            f"sample point ({x}, {y}) outside grid extent [0, {w - 1}] x [0, {h - 1}]"
        )
    if not 0 <= channel < grid.channels:
        raise CoordinateRangeError(f"channel {channel} out of range (have {grid.channels})")
    x0 = min(int(np.floor(x)), w - 2) if w > 1 else 0
    y0 = min(int(np.floor(y)), h - 2) if h > 1 else 0
    fx = x - x0
    fy = y - y0
    v = grid.values
    x1 = min(x0 + 1, w - 1)
    y1 = min(y0 + 1, h - 1)
    top = (1.0 - fx) * v[y0, x0, channel] + fx * v[y0, x1, channel]
    bot = (1.0 - fx) * v[y1, x0, channel] + fx * v[y1, x1, channel]
    return float((1.0 - fy) * top + fy * bot)


def bilinear_sample_many(grid: Grid2D, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Vectorized bilinear sampling of all channels at n points -> (n, channels).

    Coordinates must already lie inside the grid extent (callers clamp).
    """
    w, h = grid.width, grid.height
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if np.any(xs < 0) or np.any(xs > w - 1) or np.any(ys < 0) or np.any(ys > h - 1):
        raise CoordinateRangeError("sample points outside grid extent")
    x0 = np.minimum(np.floor(xs).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(ys).astype(np.intp), max(h - 2, 0))
    fx = (xs - x0)[:, np.newaxis]
    fy = (ys - y0)[:, np.newaxis]
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    v = grid.values
    top = (1.0 - fx) * v[y0, x0, :] + fx * v[y0, x1, :]
    bot = (1.0 - fx) * v[y1, x0, :] + fx * v[y1, x1, :]
    return (1.0 - fy) * top + fy * bot


@dataclass(frozen=True)
class GradCheckReport:
    """Outcome of a finite-difference gradient check."""

    parameter_count: int
    max_relative_error: float
    worst_parameter_index: int

    def ok(self, tolerance: float = 1e-4) -> bool:
        return self.max_relative_error < tolerance


def finite_difference_check(
    loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    params: np.ndarray,
    epsilon: float = 1e-5,
) -> GradCheckReport:
    """Compare an analytic gradient against central differences.

    ``loss_fn`` maps a flat parameter vector to ``(loss, gradient)``. Each
    parameter i is perturbed by +/- ``epsilon`` and the analytic gradient is
    compared against ``(f(p+eps) - f(p-eps)) / (2 eps)`` with relative error
    denominator ``max(|analytic|, |numeric|, 1e-8)``.
    """
    params = np.asarray(params, dtype=np.float64).ravel()
    loss, grad = loss_fn(params)
    if not np.isfinite(loss):
        raise EvaluationError(f"loss is non-finite at the evaluation point: {loss}")
    grad = np.asarray(grad, dtype=np.float64).ravel()
    if grad.shape != params.shape:
        raise ShapeError(f"gradient shape {grad.shape} != parameter shape {params.shape}")

    max_rel = 0.0
    worst = 0
    work = params.copy()
    for i in range(params.size):
        orig = work[i]
        work[i] = orig + epsilon
        lo_plus, _ = loss_fn(work)
        work[i] = orig - epsilon
        lo_minus, _ = loss_fn(work)
        work[i] = orig
        if not (np.isfinite(lo_plus) and np.isfinite(lo_minus)):
            raise EvaluationError(f"loss is non-finite near parameter {i}")
        numeric = (lo_plus - lo_minus) / (2.0 * epsilon)
        denom = max(abs(grad[i]), abs(numeric), 1e-8)
        rel = abs(grad[i] - numeric) / denom
        if rel > max_rel:
            max_rel = rel
            worst = i
    return GradCheckReport(
        parameter_count=int(params.size),
        max_relative_error=float(max_rel),
        worst_parameter_index=int(worst),
    )
