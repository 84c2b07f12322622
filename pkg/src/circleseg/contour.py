"""Contour deformation: ring sampling, vertex features, and the offset head.

A contour is an ordered ring of vertices in image pixels, clockwise in image
coordinates (y pointing down). Rings constructed from circles or polygons
start at the top-most point so that predicted and ground-truth vertices pair
by index. Deformation gathers per-vertex features from a map grid, runs them
through a stack of circular convolutions, and moves every vertex by a
regressed (dx, dy); gradients flow back through the vertex positions across
iterations and into the map values, so the whole pipeline trains end to end.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import GeometryError, ShapeError
from .grid import Grid2D
from .layers import (
    Standardization,
    dense_backward,
    dense_forward,
    relu,
    relu_backward,
    uniform_fan_in_init,
)


class CircleContour:
    """Ring of vertices, stored exactly as given (no re-canonicalization).

    Construction helpers (:func:`sample_circle_vertices`,
    :func:`resample_polygon_uniform`) produce rings that start at the top-most
    point and run clockwise; deformed rings keep whatever index alignment the
    initial ring had, which is what the vertex-wise loss relies on.
    """

    __slots__ = ("vertices",)

    def __init__(self, vertices: np.ndarray) -> None:
        v = np.asarray(vertices, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != 2:
            raise ShapeError(f"contour vertices must be (n, 2), got {v.shape}")
        if v.shape[0] < 3:
            raise ShapeError(f"contour needs at least 3 vertices, got {v.shape[0]}")
        if not np.all(np.isfinite(v)):
            raise ShapeError("contour vertices must be finite")
        self.vertices = v

    def __len__(self) -> int:
        return int(self.vertices.shape[0])

    def copy(self) -> "CircleContour":
        return CircleContour(self.vertices.copy())

    def centroid(self) -> tuple[float, float]:
        c = self.vertices.mean(axis=0)
        return float(c[0]), float(c[1])

    def signed_area(self) -> float:
        """Shoelace area; positive means clockwise in image coordinates."""
        x = self.vertices[:, 0]
        y = self.vertices[:, 1]
        return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def sample_circle_vertices(circle, n: int = 128) -> CircleContour:
    """Equally spaced ring on a circle, clockwise from the top-most point.

    Accepts anything with center_x, center_y, radius attributes.
    """
    if n < 3:
        raise ValueError(f"need at least 3 vertices, got {n}")
    r = float(circle.radius)
    if r <= 0:
        raise GeometryError(f"radius must be positive, got {r}")
    theta = 2.0 * np.pi * np.arange(n) / n
    xs = circle.center_x + r * np.sin(theta)
    ys = circle.center_y - r * np.cos(theta)
    return CircleContour(np.stack([xs, ys], axis=1))


def _dedup_closed(points: np.ndarray) -> np.ndarray:
    if points.shape[0] >= 2 and np.array_equal(points[0], points[-1]):
        points = points[:-1]
    return points


def resample_polygon_uniform(polygon, n: int = 128) -> CircleContour:
    """n points equally spaced by arc length, top-most start, clockwise.

    The input is a closed point list (a repeated closing point is tolerated);
    orientation is normalized, so either winding is accepted.
    """
    if n < 3:
        raise ValueError(f"need at least 3 vertices, got {n}")
    pts = _dedup_closed(np.asarray(polygon, dtype=np.float64))
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
        raise GeometryError(f"polygon must have at least 3 distinct points, got shape {pts.shape}")

    # Clockwise in image coords (y down) has positive shoelace sum.
    area2 = float(np.sum(pts[:, 0] * np.roll(pts[:, 1], -1) - np.roll(pts[:, 0], -1) * pts[:, 1]))
    if area2 < 0:
        pts = pts[::-1]

    start = int(np.lexsort((pts[:, 0], pts[:, 1]))[0])
    pts = np.roll(pts, -start, axis=0)

    edges = np.roll(pts, -1, axis=0) - pts
    lengths = np.hypot(edges[:, 0], edges[:, 1])
    perimeter = float(lengths.sum())
    if perimeter <= 0:
        raise GeometryError("polygon has zero perimeter")

    cum = np.concatenate([[0.0], np.cumsum(lengths)])
    targets = perimeter * np.arange(n) / n
    idx = np.searchsorted(cum, targets, side="right") - 1
    idx = np.clip(idx, 0, len(pts) - 1)
    seg_len = lengths[idx]
    frac = np.where(seg_len > 0, (targets - cum[idx]) / np.where(seg_len > 0, seg_len, 1.0), 0.0)
    out = pts[idx] + frac[:, None] * edges[idx]
    return CircleContour(out)


@dataclass
class VertexFeatures:
    """Per-vertex feature rows; clamped counts vertices pulled back in bounds."""

    values: np.ndarray
    clamped: int = 0

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ShapeError(f"vertex features must be 2-D, got shape {v.shape}")
        self.values = v

    @property
    def dim(self) -> int:
        return int(self.values.shape[1])


@dataclass
class CircularKernel:
    """Taps of a ring convolution, indexed j = -r .. r as taps[j + r]."""

    taps: np.ndarray

    def __post_init__(self) -> None:
        t = np.asarray(self.taps, dtype=np.float64)
        if t.ndim != 3 or t.shape[0] % 2 == 0:
            raise ShapeError(f"kernel taps must be (2r+1, d_in, d_out), got {t.shape}")
        self.taps = t

    @property
    def half_width(self) -> int:
        return int(self.taps.shape[0]) // 2


def circular_conv(features: VertexFeatures, kernel: CircularKernel) -> VertexFeatures:
    """Ring convolution: out[i] = sum_j features[(i + j) mod n] . taps[j + r]."""
    if features.dim != kernel.taps.shape[1]:
        raise ShapeError(
            f"feature dim {features.dim} != kernel input dim {kernel.taps.shape[1]}"
        )
    out = _kernels.circular_conv_forward(features.values, kernel.taps)
    return VertexFeatures(out, clamped=features.clamped)


def _gather_forward(
    vertices: np.ndarray, maps: np.ndarray, center: tuple[float, float], downsample: float
):
    """Bilinear map samples plus center-relative offsets, with a backward cache."""
    h, w, c = maps.shape
    if h < 2 or w < 2:
        raise ShapeError(f"feature map must be at least 2x2, got {h}x{w}")
    if not np.isfinite(vertices).all():
        raise GeometryError("contour vertices became non-finite during deformation")
    u_raw = vertices[:, 0] / downsample
    v_raw = vertices[:, 1] / downsample
    u = np.clip(u_raw, 0.0, w - 1.0)
    v = np.clip(v_raw, 0.0, h - 1.0)
    in_x = u_raw == u
    in_y = v_raw == v
    clamped = int(np.count_nonzero(~(in_x & in_y)))

    x0 = np.minimum(np.floor(u).astype(np.intp), w - 2)
    y0 = np.minimum(np.floor(v).astype(np.intp), h - 2)
    fx = u - x0
    fy = v - y0

    m00 = maps[y0, x0]
    m10 = maps[y0, x0 + 1]
    m01 = maps[y0 + 1, x0]
    m11 = maps[y0 + 1, x0 + 1]
    w00 = ((1 - fx) * (1 - fy))[:, None]
    w10 = (fx * (1 - fy))[:, None]
    w01 = ((1 - fx) * fy)[:, None]
    w11 = (fx * fy)[:, None]
    samples = w00 * m00 + w10 * m10 + w01 * m01 + w11 * m11

    values = np.concatenate(
        [samples, (vertices[:, 0] - center[0])[:, None], (vertices[:, 1] - center[1])[:, None]],
        axis=1,
    )
    cache = (maps.shape, x0, y0, fx, fy, in_x, in_y, m00, m10, m01, m11, downsample)
    return values, clamped, cache


def _gather_backward(cache, g_values: np.ndarray):
    """Gradients w.r.t. vertex coordinates and the sampled map values."""
    maps_shape, x0, y0, fx, fy, in_x, in_y, m00, m10, m01, m11, downsample = cache
    c = maps_shape[2]
    gs = g_values[:, :c]

    d_du = (1 - fy)[:, None] * (m10 - m00) + fy[:, None] * (m11 - m01)
    d_dv = (1 - fx)[:, None] * (m01 - m00) + fx[:, None] * (m11 - m10)
    gu = (gs * d_du).sum(axis=1)
    gv = (gs * d_dv).sum(axis=1)

    g_vertices = np.zeros((g_values.shape[0], 2))
    g_vertices[:, 0] = np.where(in_x, gu / downsample, 0.0) + g_values[:, c]
    g_vertices[:, 1] = np.where(in_y, gv / downsample, 0.0) + g_values[:, c + 1]

    g_maps = np.zeros(maps_shape)
    w00 = ((1 - fx) * (1 - fy))[:, None]
    w10 = (fx * (1 - fy))[:, None]
    w01 = ((1 - fx) * fy)[:, None]
    w11 = (fx * fy)[:, None]
    np.add.at(g_maps, (y0, x0), w00 * gs)
    np.add.at(g_maps, (y0, x0 + 1), w10 * gs)
    np.add.at(g_maps, (y0 + 1, x0), w01 * gs)
    np.add.at(g_maps, (y0 + 1, x0 + 1), w11 * gs)
    return g_vertices, g_maps


def gather_vertex_features(
    contour: CircleContour, maps: Grid2D, center: tuple[float, float], downsample: float = 1.0
) -> VertexFeatures:
    """Feature row per vertex: bilinear map samples ++ (x - cx, y - cy).

    Vertices landing outside the map after scaling are clamped to the border
    and counted in the result's clamped field.
    """
    values, clamped, _ = _gather_forward(contour.vertices, maps.values, center, downsample)
    return VertexFeatures(values, clamped=clamped)


@dataclass(frozen=True)
class DeformationHeadConfig:
    """Sizes for the offset-regression head.

    feature_channels counts map channels only; each vertex row additionally
    carries its two center-relative coordinates.
    """

    feature_channels: int
    width: int = 24
    blocks: int = 8
    kernel_half_width: int = 4
    seed: int = 0

    def __post_init__(self) -> None:
        if self.feature_channels < 1 or self.width < 1 or self.blocks < 1:
            raise ValueError("head sizes must be positive")
        if self.kernel_half_width < 0:
            raise ValueError("kernel half-width must be non-negative")

    @property
    def input_dim(self) -> int:
        return self.feature_channels + 2


class DeformationHead:
    """Ring-conv stack, max-pool fusion, and a 3-stage offset predictor.

    Blocks apply circular convolution + bias, a frozen per-feature
    standardization, then ReLU. Fusion sends the block output through a
    per-vertex dense layer, max-pools it over the ring, and concatenates the
    pooled vector back onto every vertex. Prediction is dense-ReLU-dense-ReLU-
    dense down to 2 offsets per vertex. Standardization statistics are fixed
    by calibrate() and are not parameters.
    """

    def __init__(self, config: DeformationHeadConfig) -> None:
        self.config = config
        rng = np.random.default_rng(config.seed)
        taps_len = 2 * config.kernel_half_width + 1
        w = config.width

        self.block_taps: list[np.ndarray] = []
        self.block_bias: list[np.ndarray] = []
        self.norms: list[Standardization] = []
        d_in = config.input_dim
        for _ in range(config.blocks):
            fan_in = taps_len * d_in
            self.block_taps.append(uniform_fan_in_init(rng, (taps_len, d_in, w), fan_in))
            self.block_bias.append(np.zeros(w))
            self.norms.append(Standardization.identity(w))
            d_in = w

        self.fuse_w = uniform_fan_in_init(rng, (w, w), w)
        self.fuse_b = np.zeros(w)
        self.pred_w1 = uniform_fan_in_init(rng, (2 * w, w), 2 * w)
        self.pred_b1 = np.zeros(w)
        self.pred_w2 = uniform_fan_in_init(rng, (w, w), w)
        self.pred_b2 = np.zeros(w)
        # Final offset layer starts at zero so a fresh head moves no vertices;
        # gradients still reach it through its own weight update.
        self.pred_w3 = np.zeros((w, 2))
        self.pred_b3 = np.zeros(2)

    def params(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for taps, bias in zip(self.block_taps, self.block_bias):
            out.extend([taps, bias])
        out.extend([self.fuse_w, self.fuse_b])
        out.extend([self.pred_w1, self.pred_b1, self.pred_w2, self.pred_b2])
        out.extend([self.pred_w3, self.pred_b3])
        return out

    def norm_arrays(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for norm in self.norms:
            out.extend([norm.mean, norm.inv_std])
        return out

    def calibrate(self, rings: list[np.ndarray], std_floor: float = 1e-3) -> None:
        """Freeze per-block standardization statistics from sample rings.

        Each ring is a (n, input_dim) feature matrix; rings are convolved
        separately (wraparound must not cross rings) and the pre-activation
        rows of all rings are pooled per block to estimate mean and scale.
        """
        hs = [np.asarray(r, dtype=np.float64) for r in rings]
        for b in range(self.config.blocks):
            zs = [
                _kernels.circular_conv_forward(h, self.block_taps[b]) + self.block_bias[b]
                for h in hs
            ]
            self.norms[b] = Standardization.from_batch(np.concatenate(zs, axis=0), std_floor)
            hs = [relu(self.norms[b].apply(z)) for z in zs]

    def forward(self, features: np.ndarray) -> np.ndarray:
        offsets, _ = self.forward_train(features)
        return offsets

    def forward_train(self, features: np.ndarray):
        """Offsets (n, 2) plus the cache needed by backward."""
        h = np.asarray(features, dtype=np.float64)
        if h.shape[1] != self.config.input_dim:
            raise ShapeError(f"head expects dim {self.config.input_dim}, got {h.shape[1]}")
        block_cache = []
        for b in range(self.config.blocks):
            z = _kernels.circular_conv_forward(h, self.block_taps[b]) + self.block_bias[b]
            s = self.norms[b].apply(z)
            block_cache.append((h, s))
            h = relu(s)

        fz = dense_forward(h, self.fuse_w, self.fuse_b)
        pool_idx = np.argmax(fz, axis=0)
        pooled = fz[pool_idx, np.arange(fz.shape[1])]
        g = np.concatenate([h, np.broadcast_to(pooled, (h.shape[0], pooled.shape[0]))], axis=1)

        a1 = dense_forward(g, self.pred_w1, self.pred_b1)
        h1 = relu(a1)
        a2 = dense_forward(h1, self.pred_w2, self.pred_b2)
        h2 = relu(a2)
        offsets = dense_forward(h2, self.pred_w3, self.pred_b3)

        cache = (block_cache, h, fz, pool_idx, g, a1, h1, a2, h2)
        return offsets, cache

    def backward(self, cache, g_offsets: np.ndarray):
        """Gradients w.r.t. the input features and every parameter.

        Returns (g_features, grads) with grads aligned to params().
        """
        block_cache, h, fz, pool_idx, g, a1, h1, a2, h2 = cache
        w = self.config.width

        g_h2, g_w3, g_b3 = dense_backward(h2, self.pred_w3, g_offsets)
        g_a2 = relu_backward(a2, g_h2)
        g_h1, g_w2, g_b2 = dense_backward(h1, self.pred_w2, g_a2)
        g_a1 = relu_backward(a1, g_h1)
        g_g, g_w1, g_b1 = dense_backward(g, self.pred_w1, g_a1)

        g_h = g_g[:, :w].copy()
        g_pooled = g_g[:, w:].sum(axis=0)
        g_fz = np.zeros_like(fz)
        g_fz[pool_idx, np.arange(w)] = g_pooled
        g_h_fuse, g_fw, g_fb = dense_backward(h, self.fuse_w, g_fz)
        g_h += g_h_fuse

        block_grads: list[np.ndarray] = []
        for b in reversed(range(self.config.blocks)):
            h_in, s = block_cache[b]
            g_s = relu_backward(s, g_h)
            g_z = self.norms[b].backward(g_s)
            g_h, g_taps = _kernels.circular_conv_backward(h_in, self.block_taps[b], g_z)
            block_grads.append(g_z.sum(axis=0))
            block_grads.append(g_taps)
        block_grads.reverse()

        grads = block_grads + [g_fw, g_fb, g_w1, g_b1, g_w2, g_b2, g_w3, g_b3]
        return g_h, grads


@dataclass
class DeformationTrace:
    """Everything backward needs: vertex rings per iteration plus caches."""

    rings: list[np.ndarray]
    gather_caches: list
    head_caches: list
    clamped: int
    center: tuple[float, float]

    @property
    def iterations(self) -> int:
        return len(self.head_caches)


def deform_contour_train(
    contour: CircleContour,
    maps: Grid2D,
    head: DeformationHead,
    iterations: int = 3,
    downsample: float = 1.0,
) -> DeformationTrace:
    """Run the deformation iterations, retaining intermediates for backward.

    The center used for relative-offset features is the initial ring centroid
    and stays fixed across iterations.
    """
    if iterations < 1:
        raise ValueError(f"iterations must be >= 1, got {iterations}")
    center = contour.centroid()
    rings = [contour.vertices.copy()]
    gather_caches = []
    head_caches = []
    clamped = 0
    for _ in range(iterations):
        values, n_clamped, g_cache = _gather_forward(rings[-1], maps.values, center, downsample)
        clamped += n_clamped
        offsets, h_cache = head.forward_train(values)
        gather_caches.append(g_cache)
        head_caches.append(h_cache)
        rings.append(rings[-1] + offsets)
    return DeformationTrace(rings, gather_caches, head_caches, clamped, center)


def deform_contour(
    contour: CircleContour,
    maps: Grid2D,
    head: DeformationHead,
    iterations: int = 3,
    downsample: float = 1.0,
) -> CircleContour:
    trace = deform_contour_train(contour, maps, head, iterations, downsample)
    return CircleContour(trace.rings[-1])


def deform_backward(trace: DeformationTrace, head: DeformationHead, g_rings: list[np.ndarray]):
    """Backpropagate per-iteration vertex gradients through the whole chain.

    g_rings[t] is the loss gradient w.r.t. the ring after iteration t+1.
    Vertex positions feed the next iteration's feature gather, so gradients
    accumulate across iterations and into the map values. Returns
    (g_maps, head_grads) with head_grads aligned to head.params().
    """
    if len(g_rings) != trace.iterations:
        raise ShapeError(f"expected {trace.iterations} ring gradients, got {len(g_rings)}")
    head_grads = [np.zeros_like(p) for p in head.params()]
    g_maps = None
    g_v = np.zeros_like(trace.rings[0])
    for t in reversed(range(trace.iterations)):
        g_v = g_v + g_rings[t]
        g_features, grads_t = head.backward(trace.head_caches[t], g_v)
        for acc, g in zip(head_grads, grads_t):
            acc += g
        g_coords, g_m = _gather_backward(trace.gather_caches[t], g_features)
        g_maps = g_m if g_maps is None else g_maps + g_m
        g_v = g_v + g_coords
    return g_maps, head_grads


def contour_loss(deformed: CircleContour, truth: CircleContour) -> tuple[float, np.ndarray]:
    """Mean vertex-wise L1 distance plus gradient w.r.t. deformed vertices."""
    if len(deformed) != len(truth):
        raise ShapeError(f"vertex counts differ: {len(deformed)} vs {len(truth)}")
    diff = deformed.vertices - truth.vertices
    n = len(deformed)
    loss = float(np.abs(diff).sum()) / n
    grad = np.sign(diff) / n
    return loss, grad
