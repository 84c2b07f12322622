"""Patch grids over large images and cross-patch detection merging."""

from __future__ import annotations

from dataclasses import dataclass, replace

from .detection import DetectionCircle
from .errors import SizingError
from .matching import circle_iou


def axis_origins(length: int, window: int, stride: int) -> list[int]:
    """Window origins along one axis: stride multiples, last shifted to the edge."""
    if window > length:
        raise SizingError(f"window {window} exceeds axis length {length}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    origins = list(range(0, length - window + 1, stride))
    if origins[-1] + window < length:
        origins.append(length - window)
    return origins


@dataclass(frozen=True)
class PatchPlan:
    wsi_width: int
    wsi_height: int
    patch_size: int
    stride: int
    patches: tuple[tuple[int, int], ...]


def plan_patches(
    wsi_width: int, wsi_height: int, patch_size: int = 1024, stride: int | None = None
) -> PatchPlan:
    """Row-major patch origins covering the image, edge patches shifted inward."""
    if stride is None:
        stride = patch_size
    if patch_size < 1:
        raise ValueError(f"patch_size must be >= 1, got {patch_size}")
    if wsi_width < patch_size or wsi_height < patch_size:
        raise SizingError(
            f"image {wsi_width}x{wsi_height} smaller than patch size {patch_size}"
        )
    xs = axis_origins(wsi_width, patch_size, stride)
    ys = axis_origins(wsi_height, patch_size, stride)
    origins = tuple((x, y) for y in ys for x in xs)
    return PatchPlan(wsi_width, wsi_height, patch_size, stride, origins)


def merge_detections(
    per_patch: list[tuple[tuple[int, int], list[DetectionCircle]]],
    iou_threshold: float = 0.5,
) -> list[DetectionCircle]:
    """Translate patch-local detections to WSI coordinates and deduplicate.

    Candidates are visited by descending score (ties by coordinates); a
    candidate survives unless it overlaps an already-kept detection at or
    above the IoU threshold. Merging is idempotent: all survivors pairwise
    overlap below the threshold.
    """
    translated: list[DetectionCircle] = []
    for (ox, oy), detections in per_patch:
        for det in detections:
            translated.append(
                replace(det, center_x=det.center_x + ox, center_y=det.center_y + oy)
            )
    translated.sort(
        key=lambda d: (-d.score, d.center_x, d.center_y, d.radius, d.category)
    )
    kept: list[DetectionCircle] = []
    for det in translated:
        if all(circle_iou(det, other) < iou_threshold for other in kept):
            kept.append(det)
    return kept
