"""Circle proposal detection: target rendering, losses, peak finding, decoding.

Objects are represented as circles. Ground-truth centers become Gaussian bumps
on a down-sampled heatmap; sub-cell center remainders and radii are regressed
densely and read off at peak cells. Decoding inverts the rendering exactly, so
with perfect maps the planted circles come back bit-for-bit (the down-sample
factor defaults to a power of two on purpose).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import AnnotationError, DomainError, ShapeError
from .grid import Grid2D, GridSpec

# Guard band applied to heatmap probabilities before the focal loss.
PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class GaussianTargetConfig:
    """Shape of the rendered center bumps and the focal-loss exponents.

    The kernel width follows the object: sigma = max(sigma_floor,
    r_cells / sigma_divisor) where r_cells is the radius in down-sampled
    grid cells.
    """

    alpha: float = 2.0
    beta: float = 4.0
    sigma_floor: float = 1.0
    sigma_divisor: float = 3.0

    def __post_init__(self) -> None:
        if self.alpha <= 0 or self.beta <= 0:
            raise ValueError("focal exponents must be positive")
        if self.sigma_floor <= 0 or self.sigma_divisor <= 0:
            raise ValueError("sigma policy parameters must be positive")

    def sigma_for(self, radius_cells: float) -> float:
        return max(self.sigma_floor, radius_cells / self.sigma_divisor)


@dataclass(frozen=True)
class GroundTruthCircle:
    center_x: float
    center_y: float
    radius: float
    category: int = 0

    def __post_init__(self) -> None:
        if not (self.radius > 0):
            raise ValueError(f"radius must be positive, got {self.radius}")
        if self.category < 0:
            raise ValueError(f"category must be non-negative, got {self.category}")


@dataclass(frozen=True)
class DetectionCircle:
    center_x: float
    center_y: float
    radius: float
    score: float
    category: int = 0

    def __post_init__(self) -> None:
        if not (self.radius > 0):
            raise ValueError(f"radius must be positive, got {self.radius}")
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be in [0, 1], got {self.score}")


@dataclass(frozen=True)
class DetectionLossWeights:
    lambda_radius: float = 0.1
    lambda_off: float = 1.0

    def __post_init__(self) -> None:
        if self.lambda_radius < 0 or self.lambda_off < 0:
            raise ValueError("loss weights must be non-negative")


class Peak(NamedTuple):
    cell_x: int
    cell_y: int
    category: int
    score: float


def _truth_cell(circle: GroundTruthCircle, spec: GridSpec) -> tuple[int, int]:
    """Down-sampled integer cell holding the circle center."""
    if not (0 <= circle.center_x <= spec.input_width and 0 <= circle.center_y <= spec.input_height):
        raise AnnotationError(
            f"circle center ({circle.center_x}, {circle.center_y}) outside "
            f"{spec.input_width}x{spec.input_height} image"
        )
    cx = int(np.floor(circle.center_x / spec.downsample))
    cy = int(np.floor(circle.center_y / spec.downsample))
    if not (0 <= cx < spec.grid_width and 0 <= cy < spec.grid_height):
        raise AnnotationError(
            f"circle center maps to cell ({cx}, {cy}) outside "
            f"{spec.grid_width}x{spec.grid_height} grid"
        )
    return cx, cy


def render_center_heatmap(
    circles: list[GroundTruthCircle], spec: GridSpec, cfg: GaussianTargetConfig
) -> Grid2D:
    """Gaussian center targets, one channel per category, peak value 1.

    Overlapping kernels combine by elementwise max, so the target stays a
    probability and every down-sampled truth cell keeps its exact 1.0.
    """
    heat = np.zeros((spec.grid_height, spec.grid_width, spec.classes))
    ys = np.arange(spec.grid_height, dtype=np.float64)[:, None]
    xs = np.arange(spec.grid_width, dtype=np.float64)[None, :]
    for circle in circles:
        if circle.category >= spec.classes:
            raise AnnotationError(
                f"category {circle.category} out of range for {spec.classes} classes"
            )
        cx, cy = _truth_cell(circle, spec)
        sigma = cfg.sigma_for(circle.radius / spec.downsample)
        bump = np.exp(-((xs - cx) ** 2 + (ys - cy) ** 2) / (2.0 * sigma * sigma))
        np.maximum(heat[:, :, circle.category], bump, out=heat[:, :, circle.category])
    return Grid2D(heat)


def render_regression_targets(
    circles: list[GroundTruthCircle], spec: GridSpec
) -> tuple[Grid2D, Grid2D]:
    """Dense offset (2ch) and radius (1ch) maps holding truth at center cells.

    Cells not under any truth center are zero. Used for round-trip checks and
    as a reference for what the regression losses pull predictions toward.
    """
    offsets = np.zeros((spec.grid_height, spec.grid_width, 2))
    radii = np.zeros((spec.grid_height, spec.grid_width, 1))
    for circle in circles:
        cx, cy = _truth_cell(circle, spec)
        offsets[cy, cx, 0] = circle.center_x / spec.downsample - cx
        offsets[cy, cx, 1] = circle.center_y / spec.downsample - cy
        radii[cy, cx, 0] = circle.radius / spec.downsample
    return Grid2D(offsets), Grid2D(radii)


def focal_loss(
    pred: Grid2D, target: Grid2D, cfg: GaussianTargetConfig, num_objects: int
) -> tuple[float, np.ndarray]:
    """Penalty-reduced focal loss over the heatmap, plus gradient w.r.t. pred.

    Cells where the target is exactly 1 use the positive branch
    (1-p)^alpha * log p; all other cells use (1-t)^beta * p^alpha * log(1-p).
    The sum is negated and divided by the object count.
    """
    if pred.values.shape != target.values.shape:
        raise ShapeError(f"pred shape {pred.values.shape} != target shape {target.values.shape}")
    if num_objects < 1:
        raise ValueError(f"num_objects must be >= 1, got {num_objects}")
    p = pred.values
    t = target.values
    if np.any(p <= 0.0) or np.any(p >= 1.0):
        raise DomainError("predicted probabilities must lie strictly inside (0, 1)")

    alpha, beta = cfg.alpha, cfg.beta
    pos = t == 1.0
    one_minus_p = 1.0 - p
    log_p = np.log(p)
    log_1mp = np.log1p(-p)

    pos_terms = np.where(pos, one_minus_p**alpha * log_p, 0.0)
    neg_terms = np.where(pos, 0.0, (1.0 - t) ** beta * p**alpha * log_1mp)
    loss = -(pos_terms.sum() + neg_terms.sum()) / num_objects

    d_pos = -alpha * one_minus_p ** (alpha - 1.0) * log_p + one_minus_p**alpha / p
    d_neg = (1.0 - t) ** beta * (alpha * p ** (alpha - 1.0) * log_1mp - p**alpha / one_minus_p)
    grad = -np.where(pos, d_pos, d_neg) / num_objects
    return float(loss), grad


def offset_loss(
    pred_offsets: Grid2D, circles: list[GroundTruthCircle], spec: GridSpec
) -> tuple[float, np.ndarray]:
    """Mean L1 between predicted offsets at truth cells and sub-cell remainders.

    Per object the x and y discrepancies are summed; the total is averaged
    over objects. Gradient is the usual sign subgradient.
    """
    if pred_offsets.channels != 2:
        raise ShapeError(f"offset map needs 2 channels, got {pred_offsets.channels}")
    if not circles:
        raise ValueError("offset_loss needs at least one circle")
    pred = pred_offsets.values
    grad = np.zeros_like(pred)
    n = len(circles)
    total = 0.0
    for circle in circles:
        cx, cy = _truth_cell(circle, spec)
        target = np.array(
            [circle.center_x / spec.downsample - cx, circle.center_y / spec.downsample - cy]
        )
        diff = pred[cy, cx, :] - target
        total += float(np.abs(diff).sum())
        grad[cy, cx, :] += np.sign(diff) / n
    return total / n, grad


def radius_loss(
    pred_radius: Grid2D, circles: list[GroundTruthCircle], spec: GridSpec
) -> tuple[float, np.ndarray]:
    """Mean L1 between predicted radii at truth cells and radii in grid units."""
    if pred_radius.channels != 1:
        raise ShapeError(f"radius map needs 1 channel, got {pred_radius.channels}")
    if not circles:
        raise ValueError("radius_loss needs at least one circle")
    pred = pred_radius.values
    grad = np.zeros_like(pred)
    n = len(circles)
    total = 0.0
    for circle in circles:
        cx, cy = _truth_cell(circle, spec)
        diff = pred[cy, cx, 0] - circle.radius / spec.downsample
        total += abs(float(diff))
        grad[cy, cx, 0] += np.sign(diff) / n
    return total / n, grad


def detection_loss(
    l_heatmap: float, l_radius: float, l_offset: float, weights: DetectionLossWeights
) -> float:
    return l_heatmap + weights.lambda_radius * l_radius + weights.lambda_off * l_offset


def extract_peaks(heatmap: Grid2D, top_n: int, ct_score: float) -> list[Peak]:
    """Cells that dominate their 8-neighborhood, by descending score.

    Border cells compare only against neighbors that exist. The qualifying
    cells are sorted by score (ties: category, row, column ascending),
    truncated to the strongest top_n, then filtered by ct_score. The
    local-maximum rule doubles as non-maximum suppression.
    """
    if top_n < 1:
        raise ValueError(f"top_n must be >= 1, got {top_n}")
    v = heatmap.values
    h, w, c = v.shape
    padded = np.full((h + 2, w + 2, c), -np.inf)
    padded[1:-1, 1:-1, :] = v
    is_peak = np.ones((h, w, c), dtype=bool)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            neighbor = padded[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w, :]
            is_peak &= v >= neighbor
    ys, xs, cs = np.nonzero(is_peak)
    order = sorted(range(len(ys)), key=lambda i: (-v[ys[i], xs[i], cs[i]], cs[i], ys[i], xs[i]))
    order = order[:top_n]
    return [
        Peak(int(xs[i]), int(ys[i]), int(cs[i]), float(v[ys[i], xs[i], cs[i]]))
        for i in order
        if v[ys[i], xs[i], cs[i]] >= ct_score
    ]


def decode_circles(
    peaks: list[Peak], offset_map: Grid2D, radius_map: Grid2D, spec: GridSpec
) -> list[DetectionCircle]:
    """Turn peak cells plus regression maps into image-pixel circles.

    center = (cell + offset) * downsample, radius = radius_cells * downsample.
    Non-positive decoded radii are dropped silently.
    """
    if offset_map.channels != 2 or radius_map.channels != 1:
        raise ShapeError("decode needs a 2-channel offset map and 1-channel radius map")
    if offset_map.values.shape[:2] != (spec.grid_height, spec.grid_width):
        raise ShapeError("offset map dims do not match the grid spec")
    if radius_map.values.shape[:2] != (spec.grid_height, spec.grid_width):
        raise ShapeError("radius map dims do not match the grid spec")
    out: list[DetectionCircle] = []
    r = spec.downsample
    for peak in peaks:
        dx = offset_map.values[peak.cell_y, peak.cell_x, 0]
        dy = offset_map.values[peak.cell_y, peak.cell_x, 1]
        radius = radius_map.values[peak.cell_y, peak.cell_x, 0] * r
        if radius <= 0:
            continue
        out.append(
            DetectionCircle(
                center_x=(peak.cell_x + dx) * r,
                center_y=(peak.cell_y + dy) * r,
                radius=float(radius),
                score=peak.score,
                category=peak.category,
            )
        )
    return out
