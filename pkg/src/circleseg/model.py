"""Trainable backbone, joint detection+contour training, and checkpoints.

The backbone is a four-layer conv stack whose strides multiply to the
down-sample factor, followed by three 1x1 heads (sigmoid heatmap, offset,
radius) that share the final feature map with the contour head. Training is
plain SGD on the combined objective: detection loss plus the vertex loss
summed over all deformation iterations. Everything is driven by one seeded
generator, so runs are exactly reproducible.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import _kernels
from .contour import (
    CircleContour,
    DeformationHead,
    DeformationHeadConfig,
    contour_loss,
    deform_backward,
    deform_contour,
    deform_contour_train,
    sample_circle_vertices,
)
from .detection import (
    PROB_CLAMP,
    DetectionCircle,
    DetectionLossWeights,
    GaussianTargetConfig,
    GroundTruthCircle,
    decode_circles,
    detection_loss,
    extract_peaks,
    focal_loss,
    offset_loss,
    radius_loss,
    render_center_heatmap,
)
from .errors import GeometryError, ShapeError, TrainingError
from .grid import Grid2D, GridSpec
from .layers import flatten_arrays, relu, relu_backward, sigmoid, uniform_fan_in_init, write_flat

CHECKPOINT_MAGIC = b"CSCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class BackboneConfig:
    input_width: int
    input_height: int
    in_channels: int = 1
    width: int = 16
    classes: int = 1
    downsample: int = 4
    seed: int = 0
    heatmap_prior: float = 0.1

    def __post_init__(self) -> None:
        if self.in_channels < 1 or self.width < 1 or self.classes < 1:
            raise ValueError("channel counts must be positive")
        if not (0.0 < self.heatmap_prior < 1.0):
            raise ValueError("heatmap_prior must be in (0, 1)")
        self.strides()  # validates downsample

    def strides(self) -> list[int]:
        """Per-layer strides whose product equals the down-sample factor."""
        r = self.downsample
        out = []
        for _ in range(4):
            if r > 1:
                out.append(2)
                r //= 2
            else:
                out.append(1)
        if r != 1 or 2 ** sum(s == 2 for s in out) != self.downsample:
            raise ValueError(f"downsample must be a power of two <= 16, got {self.downsample}")
        return out

    def grid_spec(self) -> GridSpec:
        return GridSpec(
            input_width=self.input_width,
            input_height=self.input_height,
            downsample=self.downsample,
            classes=self.classes,
        )


class ToyBackbone:
    """Conv trunk emitting heatmap/offset/radius maps and a shared feature map.

    Weights start uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)] from the
    seeded generator; biases start at zero except the heatmap head, which is
    offset so the initial sigmoid output equals heatmap_prior everywhere.
    """

    def __init__(self, config: BackboneConfig) -> None:
        self.config = config
        rng = np.random.default_rng(config.seed)
        w = config.width

        self.conv_w: list[np.ndarray] = []
        self.conv_b: list[np.ndarray] = []
        c_in = config.in_channels
        for _ in range(4):
            fan_in = 3 * 3 * c_in
            self.conv_w.append(uniform_fan_in_init(rng, (3, 3, c_in, w), fan_in))
            self.conv_b.append(np.zeros(w))
            c_in = w

        self.heat_w = uniform_fan_in_init(rng, (1, 1, w, config.classes), w)
        self.heat_b = np.full(config.classes, -np.log((1.0 - config.heatmap_prior) / config.heatmap_prior))
        self.off_w = uniform_fan_in_init(rng, (1, 1, w, 2), w)
        self.off_b = np.zeros(2)
        self.rad_w = uniform_fan_in_init(rng, (1, 1, w, 1), w)
        self.rad_b = np.zeros(1)

    def params(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for cw, cb in zip(self.conv_w, self.conv_b):
            out.extend([cw, cb])
        out.extend([self.heat_w, self.heat_b, self.off_w, self.off_b, self.rad_w, self.rad_b])
        return out

    def forward_train(self, image: Grid2D):
        """All four output grids plus the cache for backward."""
        x = image.values
        cfg = self.config
        if x.shape != (cfg.input_height, cfg.input_width, cfg.in_channels):
            raise ShapeError(
                f"image shape {x.shape} does not match configured "
                f"{(cfg.input_height, cfg.input_width, cfg.in_channels)}"
            )
        strides = cfg.strides()
        conv_cache = []
        h = x
        for i in range(4):
            z = _kernels.conv2d_forward(h, self.conv_w[i], self.conv_b[i], strides[i], 1)
            conv_cache.append((h, z))
            h = relu(z)
        feature = h

        heat_logits = _kernels.conv2d_forward(feature, self.heat_w, self.heat_b, 1, 0)
        heat = sigmoid(heat_logits)
        offset = _kernels.conv2d_forward(feature, self.off_w, self.off_b, 1, 0)
        radius = _kernels.conv2d_forward(feature, self.rad_w, self.rad_b, 1, 0)

        outputs = (Grid2D(heat), Grid2D(offset), Grid2D(radius), Grid2D(feature))
        cache = (conv_cache, feature, heat)
        return outputs, cache

    def forward(self, image: Grid2D):
        outputs, _ = self.forward_train(image)
        return outputs

    def backward(self, cache, g_heat, g_offset, g_radius, g_feature):
        """Gradients for every parameter given grads on the four outputs.

        g_heat is w.r.t. the sigmoid output (probabilities), the others are
        w.r.t. raw map values. Returns grads aligned to params().
        """
        conv_cache, feature, heat = cache
        strides = self.config.strides()

        g_logits = g_heat * heat * (1.0 - heat)
        gx_h, g_hw, g_hb = _kernels.conv2d_backward(feature, self.heat_w, g_logits, 1, 0)
        gx_o, g_ow, g_ob = _kernels.conv2d_backward(feature, self.off_w, g_offset, 1, 0)
        gx_r, g_rw, g_rb = _kernels.conv2d_backward(feature, self.rad_w, g_radius, 1, 0)
        g_feat = gx_h + gx_o + gx_r + g_feature

        conv_grads: list[np.ndarray] = []
        g_out = g_feat
        for i in reversed(range(4)):
            h_in, z = conv_cache[i]
            g_z = relu_backward(z, g_out)
            g_out, g_w, g_b = _kernels.conv2d_backward(
                h_in, self.conv_w[i], g_z, strides[i], 1, need_gx=i > 0
            )
            conv_grads.append(g_b)
            conv_grads.append(g_w)
        conv_grads.reverse()

        return conv_grads + [g_hw, g_hb, g_ow, g_ob, g_rw, g_rb]


@dataclass(frozen=True)
class TrainSample:
    """One training patch: the image plus its ground-truth circles."""

    image: Grid2D
    circles: tuple[GroundTruthCircle, ...]

    def __post_init__(self) -> None:
        if not self.circles:
            raise ValueError("training samples need at least one circle")


@dataclass(frozen=True)
class TrainConfig:
    # Default rate sits inside the stable band for the positional-feedback
    # contour branch; above roughly 0.01 the vertex loop can run away.
    learning_rate: float = 0.008
    steps: int = 100
    batch_size: int = 1
    seed: int = 0
    weights: DetectionLossWeights = field(default_factory=DetectionLossWeights)
    target: GaussianTargetConfig = field(default_factory=GaussianTargetConfig)
    vertex_count: int = 128
    contour_iterations: int = 3
    contours_per_step: int = 1
    jitter_center_px: float = 2.0
    jitter_radius_frac: float = 0.2
    calibration_rings: int = 8

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.batch_size < 1 or self.contours_per_step < 0:
            raise ValueError("batch_size must be >= 1 and contours_per_step >= 0")
        if not (0.0 <= self.jitter_radius_frac < 1.0):
            raise ValueError("jitter_radius_frac must be in [0, 1)")
        if self.vertex_count < 3 or self.contour_iterations < 1:
            raise ValueError("vertex_count >= 3 and contour_iterations >= 1 required")


@dataclass
class TrainResult:
    loss_trace: np.ndarray
    detection_trace: np.ndarray
    contour_trace: np.ndarray

    @property
    def steps(self) -> int:
        return int(self.loss_trace.shape[0])


def _jittered_circle(circle: GroundTruthCircle, cfg: TrainConfig, rng: np.random.Generator):
    dx, dy = rng.uniform(-cfg.jitter_center_px, cfg.jitter_center_px, size=2)
    scale = rng.uniform(1.0 - cfg.jitter_radius_frac, 1.0 + cfg.jitter_radius_frac)
    return GroundTruthCircle(
        center_x=circle.center_x + dx,
        center_y=circle.center_y + dy,
        radius=circle.radius * scale,
        category=circle.category,
    )


def calibrate_head(
    backbone: ToyBackbone, head: DeformationHead, dataset: list[TrainSample], cfg: TrainConfig
) -> None:
    """Freeze head standardization stats from initial-contour feature rings."""
    from .contour import _gather_forward

    rings = []
    spec = backbone.config.grid_spec()
    for sample in dataset:
        if len(rings) >= cfg.calibration_rings:
            break
        (_, _, _, feature), _ = backbone.forward_train(sample.image)
        for circle in sample.circles:
            if len(rings) >= cfg.calibration_rings:
                break
            ring = sample_circle_vertices(circle, cfg.vertex_count)
            values, _, _ = _gather_forward(
                ring.vertices, feature.values, ring.centroid(), spec.downsample
            )
            rings.append(values)
    if rings:
        head.calibrate(rings)


def train(
    backbone: ToyBackbone,
    head: DeformationHead,
    dataset: list[TrainSample],
    cfg: TrainConfig,
) -> TrainResult:
    """Joint SGD on detection + contour losses; raises on divergence.

    The contour branch initializes rings from jittered ground-truth circles
    and deforms them on the shared feature map, so its gradients reach the
    backbone through both the sampled map values and the vertex positions.
    """
    if not dataset:
        raise ValueError("dataset must be non-empty")
    spec = backbone.config.grid_spec()
    rng = np.random.default_rng(cfg.seed)

    calibrate_head(backbone, head, dataset, cfg)

    targets = [render_center_heatmap(list(s.circles), spec, cfg.target) for s in dataset]

    b_params = backbone.params()
    h_params = head.params()
    losses = np.zeros(cfg.steps)
    det_losses = np.zeros(cfg.steps)
    ctr_losses = np.zeros(cfg.steps)

    for step in range(cfg.steps):
        b_grads = [np.zeros_like(p) for p in b_params]
        h_grads = [np.zeros_like(p) for p in h_params]
        step_loss = 0.0
        step_det = 0.0
        step_ctr = 0.0

        picks = rng.integers(0, len(dataset), size=cfg.batch_size)
        try:
            for idx in picks:
                sample = dataset[int(idx)]
                circles = list(sample.circles)
                (heat, offset, radius, feature), cache = backbone.forward_train(sample.image)

                clamped = np.clip(heat.values, PROB_CLAMP, 1.0 - PROB_CLAMP)
                l_heat, g_heat = focal_loss(
                    Grid2D(clamped), targets[int(idx)], cfg.target, len(circles)
                )
                g_heat = np.where(heat.values == clamped, g_heat, 0.0)
                l_off, g_off = offset_loss(offset, circles, spec)
                l_rad, g_rad = radius_loss(radius, circles, spec)
                l_det = detection_loss(l_heat, l_rad, l_off, cfg.weights)
                g_off = g_off * cfg.weights.lambda_off
                g_rad = g_rad * cfg.weights.lambda_radius

                g_feature = np.zeros_like(feature.values)
                l_ctr = 0.0
                for _ in range(cfg.contours_per_step):
                    pick = int(rng.integers(0, len(circles)))
                    truth_circle = circles[pick]
                    init = sample_circle_vertices(
                        _jittered_circle(truth_circle, cfg, rng), cfg.vertex_count
                    )
                    truth = sample_circle_vertices(truth_circle, cfg.vertex_count)
                    trace = deform_contour_train(
                        init, feature, head, cfg.contour_iterations, spec.downsample
                    )
                    g_rings = []
                    for ring in trace.rings[1:]:
                        l_iter, g_ring = contour_loss(CircleContour(ring), truth)
                        l_ctr += l_iter
                        g_rings.append(g_ring)
                    g_maps, grads_t = deform_backward(trace, head, g_rings)
                    g_feature += g_maps
                    for acc, g in zip(h_grads, grads_t):
                        acc += g

                sample_grads = backbone.backward(cache, g_heat, g_off, g_rad, g_feature)
                for acc, g in zip(b_grads, sample_grads):
                    acc += g

                step_loss += l_det + l_ctr
                step_det += l_det
                step_ctr += l_ctr
        except (ValueError, GeometryError) as exc:
            # Runaway parameters show up as non-finite guards inside the
            # forward pass before the summed loss itself overflows.
            raise TrainingError(f"training diverged at step {step}: {exc}", step=step) from exc

        scale = cfg.learning_rate / cfg.batch_size
        if not np.isfinite(step_loss):
            raise TrainingError(f"non-finite loss {step_loss} at step {step}", step=step)
        for p, g in zip(b_params, b_grads):
            p -= scale * g
        for p, g in zip(h_params, h_grads):
            p -= scale * g

        losses[step] = step_loss / cfg.batch_size
        det_losses[step] = step_det / cfg.batch_size
        ctr_losses[step] = step_ctr / cfg.batch_size

    return TrainResult(losses, det_losses, ctr_losses)


def detect_circles(
    backbone: ToyBackbone, image: Grid2D, top_n: int = 100, ct_score: float = 0.15
) -> list[DetectionCircle]:
    heat, offset, radius, _ = backbone.forward(image)
    peaks = extract_peaks(heat, top_n, ct_score)
    return decode_circles(peaks, offset, radius, backbone.config.grid_spec())


def segment_instances(
    backbone: ToyBackbone,
    head: DeformationHead,
    image: Grid2D,
    top_n: int = 100,
    ct_score: float = 0.15,
    vertex_count: int = 128,
    iterations: int = 3,
) -> list[tuple[DetectionCircle, CircleContour]]:
    """Detect circles, then deform a ring initialized from each detection."""
    heat, offset, radius, feature = backbone.forward(image)
    spec = backbone.config.grid_spec()
    peaks = extract_peaks(heat, top_n, ct_score)
    detections = decode_circles(peaks, offset, radius, spec)
    out = []
    for det in detections:
        ring = sample_circle_vertices(det, vertex_count)
        contour = deform_contour(ring, feature, head, iterations, spec.downsample)
        out.append((det, contour))
    return out


def _flat_payload(backbone: ToyBackbone, head: DeformationHead) -> np.ndarray:
    return flatten_arrays(backbone.params() + head.params() + head.norm_arrays())


def save_checkpoint(path, backbone: ToyBackbone, head: DeformationHead) -> None:
    """Versioned binary checkpoint; layout documented in the README.

    magic "CSCK" | uint32 version | uint32 header length | JSON header |
    float64 little-endian payload. The header records both configs and every
    array shape in payload order (backbone params, head params, head
    standardization stats).
    """
    header = {
        "backbone": asdict(backbone.config),
        "head": asdict(head.config),
        "backbone_shapes": [list(p.shape) for p in backbone.params()],
        "head_shapes": [list(p.shape) for p in head.params()],
        "norm_shapes": [list(a.shape) for a in head.norm_arrays()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = _flat_payload(backbone, head).astype("<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        fh.write(payload)


def load_checkpoint(path) -> tuple[ToyBackbone, DeformationHead]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ShapeError(f"not a checkpoint file (magic {magic!r})")
        version, header_len = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ShapeError(f"unsupported checkpoint version {version}")
        header = json.loads(fh.read(header_len).decode("utf-8"))
        payload = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)

    backbone = ToyBackbone(BackboneConfig(**header["backbone"]))
    head = DeformationHead(DeformationHeadConfig(**header["head"]))
    arrays = backbone.params() + head.params() + head.norm_arrays()
    stored = header["backbone_shapes"] + header["head_shapes"] + header["norm_shapes"]
    if [list(a.shape) for a in arrays] != stored:
        raise ShapeError("checkpoint shape manifest does not match reconstructed model")
    write_flat(payload, arrays)
    return backbone, head
