"""COCO-format annotation ingest and export.

Circles ride inside the standard schema as square bounding boxes (the circle
is the inscribed one), so truth files stay loadable by stock COCO tooling and
circles round-trip losslessly. Polygon segmentations are kept verbatim.
Schema problems raise SchemaError with the offending JSON path; references to
missing ids raise IntegrityError naming the id.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .detection import GroundTruthCircle
from .errors import IntegrityError, SchemaError

_SQUARE_TOL = 1e-6


@dataclass(frozen=True)
class CocoImage:
    id: int
    file_name: str
    width: int
    height: int


@dataclass(frozen=True)
class CocoAnnotation:
    id: int
    image_id: int
    category_id: int
    circle: tuple[float, float, float] | None = None
    polygon: tuple[tuple[float, float], ...] | None = None
    score: float | None = None

    def __post_init__(self) -> None:
        if (self.circle is None) == (self.polygon is None):
            raise ValueError("annotation needs exactly one of circle or polygon")


@dataclass(frozen=True)
class AnnotationSet:
    images: dict[int, CocoImage] = field(default_factory=dict)
    annotations: dict[int, CocoAnnotation] = field(default_factory=dict)
    categories: dict[int, str] = field(default_factory=dict)

    def category_index(self, category_id: int) -> int:
        """0-based index of a category id under sorted-id ordering."""
        return sorted(self.categories).index(category_id)

    def truth_circles(self, image_id: int) -> list[GroundTruthCircle]:
        """Circle annotations of one image as ground-truth circles."""
        out = []
        for ann in sorted(self.annotations.values(), key=lambda a: a.id):
            if ann.image_id != image_id or ann.circle is None:
                continue
            cx, cy, r = ann.circle
            out.append(
                GroundTruthCircle(cx, cy, r, category=self.category_index(ann.category_id))
            )
        return out


def _need(obj, key: str, path: str):
    if not isinstance(obj, dict):
        raise SchemaError(f"expected an object at {path}")
    if key not in obj:
        raise SchemaError(f"missing field at {path}.{key}")
    return obj[key]


def _parse_geometry(raw: dict, path: str):
    seg = raw.get("segmentation")
    if seg not in (None, []):
        if not isinstance(seg, list):
            raise SchemaError(f"segmentation must be a list of rings at {path}.segmentation")
        if len(seg) != 1:
            raise SchemaError(f"exactly one polygon ring supported at {path}.segmentation")
        ring = seg[0]
        if not isinstance(ring, list) or len(ring) < 6 or len(ring) % 2 != 0:
            raise SchemaError(f"ring must be a flat even list of >= 6 numbers at {path}.segmentation[0]")
        pts = tuple((float(ring[i]), float(ring[i + 1])) for i in range(0, len(ring), 2))
        return None, pts
    bbox = _need(raw, "bbox", path)
    if not isinstance(bbox, list) or len(bbox) != 4:
        raise SchemaError(f"bbox must be [x, y, w, h] at {path}.bbox")
    x, y, w, h = (float(v) for v in bbox)
    if w <= 0 or h <= 0:
        raise SchemaError(f"bbox sides must be positive at {path}.bbox")
    if abs(w - h) > _SQUARE_TOL:
        raise SchemaError(
            f"bbox at {path}.bbox is {w}x{h}; circles need a square bbox "
            "and polygons need a segmentation"
        )
    return (x + w / 2.0, y + h / 2.0, w / 2.0), None


def load_coco(source) -> AnnotationSet:
    """Parse and validate a COCO document from a path or file-like object."""
    if hasattr(source, "read"):
        doc = json.load(source)
    else:
        with open(source, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    if not isinstance(doc, dict):
        raise SchemaError("top-level document must be an object at $")

    images: dict[int, CocoImage] = {}
    for i, raw in enumerate(_need(doc, "images", "$")):
        path = f"$.images[{i}]"
        img = CocoImage(
            id=int(_need(raw, "id", path)),
            file_name=str(_need(raw, "file_name", path)),
            width=int(_need(raw, "width", path)),
            height=int(_need(raw, "height", path)),
        )
        if img.id in images:
            raise IntegrityError(f"duplicate image id {img.id}")
        images[img.id] = img

    categories: dict[int, str] = {}
    for i, raw in enumerate(_need(doc, "categories", "$")):
        path = f"$.categories[{i}]"
        cid = int(_need(raw, "id", path))
        if cid in categories:
            raise IntegrityError(f"duplicate category id {cid}")
        categories[cid] = str(_need(raw, "name", path))

    annotations: dict[int, CocoAnnotation] = {}
    for i, raw in enumerate(_need(doc, "annotations", "$")):
        path = f"$.annotations[{i}]"
        aid = int(_need(raw, "id", path))
        image_id = int(_need(raw, "image_id", path))
        category_id = int(_need(raw, "category_id", path))
        if aid in annotations:
            raise IntegrityError(f"duplicate annotation id {aid}")
        if image_id not in images:
            raise IntegrityError(f"annotation {aid} references missing image {image_id}")
        if category_id not in categories:
            raise IntegrityError(f"annotation {aid} references missing category {category_id}")
        circle, polygon = _parse_geometry(raw, path)
        score = raw.get("score")
        annotations[aid] = CocoAnnotation(
            id=aid,
            image_id=image_id,
            category_id=category_id,
            circle=circle,
            polygon=polygon,
            score=None if score is None else float(score),
        )

    return AnnotationSet(images=images, annotations=annotations, categories=categories)


def _annotation_dict(ann: CocoAnnotation) -> dict:
    out: dict = {"id": ann.id, "image_id": ann.image_id, "category_id": ann.category_id}
    if ann.circle is not None:
        cx, cy, r = ann.circle
        out["bbox"] = [cx - r, cy - r, 2.0 * r, 2.0 * r]
        out["area"] = float(np.pi * r * r)
    else:
        xs = [p[0] for p in ann.polygon]
        ys = [p[1] for p in ann.polygon]
        flat = [v for p in ann.polygon for v in p]
        out["segmentation"] = [flat]
        out["bbox"] = [min(xs), min(ys), max(xs) - min(xs), max(ys) - min(ys)]
        area2 = sum(
            xs[i] * ys[(i + 1) % len(xs)] - xs[(i + 1) % len(xs)] * ys[i]
            for i in range(len(xs))
        )
        out["area"] = abs(area2) / 2.0
    if ann.score is not None:
        out["score"] = ann.score
    return out


def save_coco(aset: AnnotationSet, path) -> None:
    doc = {
        "images": [
            {"id": img.id, "file_name": img.file_name, "width": img.width, "height": img.height}
            for img in sorted(aset.images.values(), key=lambda im: im.id)
        ],
        "annotations": [
            _annotation_dict(a) for a in sorted(aset.annotations.values(), key=lambda a: a.id)
        ],
        "categories": [
            {"id": cid, "name": name} for cid, name in sorted(aset.categories.items())
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def annotation_set_from_truth(
    entries: list[tuple[str, int, int, tuple[GroundTruthCircle, ...]]],
    category_names: dict[int, str] | None = None,
) -> AnnotationSet:
    """Assemble a truth AnnotationSet from (file, width, height, circles) rows.

    Category indices map to COCO category ids as index + 1.
    """
    names = category_names or {0: "cell"}
    categories = {idx + 1: name for idx, name in sorted(names.items())}
    images: dict[int, CocoImage] = {}
    annotations: dict[int, CocoAnnotation] = {}
    next_ann = 1
    for i, (file_name, width, height, circles) in enumerate(entries):
        image_id = i + 1
        images[image_id] = CocoImage(image_id, file_name, width, height)
        for circle in circles:
            annotations[next_ann] = CocoAnnotation(
                id=next_ann,
                image_id=image_id,
                category_id=circle.category + 1,
                circle=(circle.center_x, circle.center_y, circle.radius),
            )
            next_ann += 1
    return AnnotationSet(images=images, annotations=annotations, categories=categories)
