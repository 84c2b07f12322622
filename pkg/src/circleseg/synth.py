"""Synthetic stained-patch generator and the appearance-shift study.

Patches contain non-overlapping anti-aliased dark disks on a light
background with additive seeded noise. Generation is a pure function of the
config: the placement draws never depend on the intensity parameters, so
shifting stain or luminance re-renders the identical geometry and noise with
only the colors changed. That makes the shift exactly invertible (within the
clamp-free range) and keeps ground truth untouched by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .detection import GroundTruthCircle
from .errors import GenerationError
from .grid import Grid2D
from .matching import MatchStats, match_stats
from .model import ToyBackbone, TrainSample, detect_circles

PLACEMENT_BUDGET = 10_000


@dataclass(frozen=True)
class SynthConfig:
    patch_size: int = 64
    cell_count_range: tuple[int, int] = (2, 6)
    radius_range: tuple[float, float] = (4.0, 9.0)
    cell_intensity: float = 0.75
    background_luminance: float = 0.85
    texture_noise_sd: float = 0.02
    seed: int = 0

    def __post_init__(self) -> None:
        lo, hi = self.cell_count_range
        if not (0 <= lo <= hi):
            raise ValueError(f"cell_count_range must satisfy 0 <= lo <= hi, got {lo}, {hi}")
        r_lo, r_hi = self.radius_range
        if not (0 < r_lo <= r_hi):
            raise ValueError(f"radius_range must satisfy 0 < lo <= hi, got {r_lo}, {r_hi}")
        if r_hi >= self.patch_size / 2:
            raise ValueError(
                f"max radius {r_hi} does not fit in a {self.patch_size}px patch"
            )
        if not (0.0 <= self.cell_intensity <= 1.0):
            raise ValueError(f"cell_intensity must be in [0, 1], got {self.cell_intensity}")
        if not (0.0 <= self.background_luminance <= 1.0):
            raise ValueError(
                f"background_luminance must be in [0, 1], got {self.background_luminance}"
            )
        if self.texture_noise_sd < 0:
            raise ValueError(f"texture_noise_sd must be >= 0, got {self.texture_noise_sd}")


@dataclass(frozen=True)
class SynthSample:
    image: Grid2D
    truth: tuple[GroundTruthCircle, ...]
    config: SynthConfig


PRESETS: dict[str, SynthConfig] = {
    "darker-background": SynthConfig(background_luminance=0.55),
    "dispersed-many-blocks": SynthConfig(cell_count_range=(8, 14), radius_range=(3.0, 6.0)),
    "lighter-stain": SynthConfig(cell_intensity=0.45),
}


def _place_circles(cfg: SynthConfig, rng: np.random.Generator) -> list[GroundTruthCircle]:
    n = int(rng.integers(cfg.cell_count_range[0], cfg.cell_count_range[1] + 1))
    r_lo, r_hi = cfg.radius_range
    size = float(cfg.patch_size)
    placed: list[GroundTruthCircle] = []
    attempts = 0
    while len(placed) < n and attempts < PLACEMENT_BUDGET:
        attempts += 1
        r = float(rng.uniform(r_lo, r_hi))
        cx = float(rng.uniform(r, size - r))
        cy = float(rng.uniform(r, size - r))
        if all(
            np.hypot(cx - p.center_x, cy - p.center_y) >= r + p.radius for p in placed
        ):
            placed.append(GroundTruthCircle(cx, cy, r))
    if len(placed) < n:
        raise GenerationError(
            f"placed only {len(placed)} of {n} cells within {PLACEMENT_BUDGET} attempts; "
            "reduce cell_count_range or radius_range"
        )
    return placed


def generate_sample(cfg: SynthConfig) -> SynthSample:
    """One synthetic patch, bit-reproducible from the config.

    Draw order is fixed: cell count, then placements, then noise. Intensity
    parameters are consumed only at render time, after all random draws.
    """
    rng = np.random.default_rng(cfg.seed)
    circles = _place_circles(cfg, rng)
    size = cfg.patch_size
    noise = rng.normal(0.0, cfg.texture_noise_sd, size=(size, size, 3))

    ys = np.arange(size, dtype=np.float64)[:, None] + 0.5
    xs = np.arange(size, dtype=np.float64)[None, :] + 0.5
    coverage = np.zeros((size, size))
    for c in circles:
        dist = np.hypot(xs - c.center_x, ys - c.center_y)
        np.maximum(coverage, np.clip(c.radius + 0.5 - dist, 0.0, 1.0), out=coverage)

    cell_value = 1.0 - cfg.cell_intensity
    base = cfg.background_luminance * (1.0 - coverage) + cell_value * coverage
    image = np.clip(base[:, :, None] + noise, 0.0, 1.0)
    return SynthSample(image=Grid2D(image), truth=tuple(circles), config=cfg)


def stain_shift(sample: SynthSample, luminance_delta: float, intensity_delta: float) -> SynthSample:
    """Re-render the identical scene with shifted appearance parameters.

    Shifted values are clamped to [0, 1]. The geometry and the noise field
    come from the same seeded draws, so only the colors change and the truth
    is untouched.
    """
    cfg = sample.config
    shifted = replace(
        cfg,
        background_luminance=float(np.clip(cfg.background_luminance + luminance_delta, 0.0, 1.0)),
        cell_intensity=float(np.clip(cfg.cell_intensity + intensity_delta, 0.0, 1.0)),
    )
    return generate_sample(shifted)


def generate_dataset(cfg: SynthConfig, count: int) -> list[SynthSample]:
    """count samples with per-sample seeds cfg.seed, cfg.seed+1, ..."""
    if count < 0:
        raise ValueError(f"count must be >= 0, got {count}")
    return [generate_sample(replace(cfg, seed=cfg.seed + i)) for i in range(count)]


def train_samples(samples: list[SynthSample]) -> list[TrainSample]:
    return [TrainSample(image=s.image, circles=s.truth) for s in samples]


@dataclass(frozen=True)
class ShiftPoint:
    luminance_delta: float
    intensity_delta: float
    f1: float
    true_positives: int
    false_positives: int
    false_negatives: int


DEFAULT_SHIFTS: tuple[tuple[float, float], ...] = (
    (0.0, 0.0),
    (-0.075, -0.075),
    (-0.15, -0.15),
    (-0.225, -0.225),
    (-0.3, -0.3),
)


def shift_study(
    backbone: ToyBackbone,
    samples: list[SynthSample],
    shifts: tuple[tuple[float, float], ...] = DEFAULT_SHIFTS,
    iou_threshold: float = 0.5,
    ct_score: float = 0.15,
    top_n: int = 100,
) -> list[ShiftPoint]:
    """Detection F1 of the trained model under each appearance shift.

    Each grid point pairs a background-luminance delta with a cell-intensity
    delta; the test set is re-rendered under the shift and scored against its
    unchanged truth.
    """
    if not samples:
        raise ValueError("shift study needs a non-empty test set")
    out = []
    for lum_delta, int_delta in shifts:
        stats = MatchStats(0, 0, 0)
        for sample in samples:
            shifted = stain_shift(sample, lum_delta, int_delta)
            detections = detect_circles(backbone, shifted.image, top_n=top_n, ct_score=ct_score)
            stats = stats + match_stats(detections, list(sample.truth), iou_threshold)
        out.append(
            ShiftPoint(
                luminance_delta=lum_delta,
                intensity_delta=int_delta,
                f1=stats.f1,
                true_positives=stats.true_positives,
                false_positives=stats.false_positives,
                false_negatives=stats.false_negatives,
            )
        )
    return out
