"""GeoJSON export/ingest for detections, byte-stable and viewer-friendly.

Detected circles become Polygon features (closed rings sampled on the
circle); classification lives under properties.classification.name and the
detection score under properties.measurements.score. Serialization is
canonical: sorted keys, compact separators, every number fixed to six
decimals, trailing newline. Parsing a canonical document and serializing it
again reproduces the bytes exactly, which the golden-file tests rely on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .contour import sample_circle_vertices
from .detection import DetectionCircle
from .errors import ExportError, GeometryError, SchemaError


@dataclass
class GeoFeature:
    ring: np.ndarray  # (m, 2), closed: first point repeated last
    classification: str
    score: float


@dataclass
class GeoFeatureSet:
    features: list[GeoFeature] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.features)


def _canon(value) -> str:
    if isinstance(value, dict):
        inner = ",".join(f"{json.dumps(k)}:{_canon(v)}" for k, v in sorted(value.items()))
        return "{" + inner + "}"
    if isinstance(value, (list, tuple)):
        return "[" + ",".join(_canon(v) for v in value) + "]"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        v = float(value)
        if not np.isfinite(v):
            raise ExportError(f"non-finite number {v} cannot be serialized")
        return format(v, ".6f")
    if isinstance(value, str):
        return json.dumps(value)
    if value is None:
        return "null"
    raise ExportError(f"cannot serialize value of type {type(value).__name__}")


def serialize_feature_set(fs: GeoFeatureSet) -> str:
    features = []
    for feature in fs.features:
        ring = np.asarray(feature.ring, dtype=np.float64)
        if not np.all(np.isfinite(ring)):
            raise ExportError("feature ring contains non-finite coordinates")
        features.append(
            {
                "type": "Feature",
                "geometry": {
                    "type": "Polygon",
                    "coordinates": [[[float(x), float(y)] for x, y in ring]],
                },
                "properties": {
                    "classification": {"name": feature.classification},
                    "measurements": {"score": float(feature.score)},
                },
            }
        )
    return _canon({"type": "FeatureCollection", "features": features}) + "\n"


def export_geojson(
    detections: list[DetectionCircle],
    polygon_vertices: int = 128,
    class_name: str = "cell",
) -> tuple[GeoFeatureSet, str]:
    """Circles as closed polygon rings plus the canonical document text."""
    fs = GeoFeatureSet()
    for det in detections:
        ring = sample_circle_vertices(det, polygon_vertices).vertices
        closed = np.vstack([ring, ring[:1]])
        fs.features.append(GeoFeature(ring=closed, classification=class_name, score=det.score))
    return fs, serialize_feature_set(fs)


def _need(obj, key: str, path: str):
    if not isinstance(obj, dict):
        raise SchemaError(f"expected an object at {path}")
    if key not in obj:
        raise SchemaError(f"missing field at {path}.{key}")
    return obj[key]


def parse_geojson(text: str) -> GeoFeatureSet:
    doc = json.loads(text)
    if _need(doc, "type", "$") != "FeatureCollection":
        raise SchemaError("expected FeatureCollection at $.type")
    raw_features = _need(doc, "features", "$")
    if not isinstance(raw_features, list):
        raise SchemaError("features must be a list at $.features")
    fs = GeoFeatureSet()
    for i, raw in enumerate(raw_features):
        path = f"$.features[{i}]"
        if _need(raw, "type", path) != "Feature":
            raise SchemaError(f"expected Feature at {path}.type")
        geometry = _need(raw, "geometry", path)
        if _need(geometry, "type", f"{path}.geometry") != "Polygon":
            raise SchemaError(f"expected Polygon at {path}.geometry.type")
        rings = _need(geometry, "coordinates", f"{path}.geometry")
        if not isinstance(rings, list) or len(rings) != 1:
            raise SchemaError(f"exactly one ring supported at {path}.geometry.coordinates")
        raw_ring = rings[0]
        if not isinstance(raw_ring, list) or len(raw_ring) < 4:
            raise SchemaError(f"ring needs at least 4 points at {path}.geometry.coordinates[0]")
        ring = np.array([[float(p[0]), float(p[1])] for p in raw_ring])
        if not np.array_equal(ring[0], ring[-1]):
            raise SchemaError(f"ring not closed at {path}.geometry.coordinates[0]")
        properties = _need(raw, "properties", path)
        name = _need(
            _need(properties, "classification", f"{path}.properties"),
            "name",
            f"{path}.properties.classification",
        )
        score = _need(
            _need(properties, "measurements", f"{path}.properties"),
            "score",
            f"{path}.properties.measurements",
        )
        fs.features.append(GeoFeature(ring=ring, classification=str(name), score=float(score)))
    return fs


def fit_circle(points: np.ndarray) -> tuple[float, float, float]:
    """Least-squares circle through the points (algebraic/Kasa fit).

    Solves x^2 + y^2 = d*x + e*y + f linearly; exact for points sampled on a
    circle, so six-decimal rings re-ingest to well within 1e-6 px.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 3:
        raise GeometryError(f"circle fit needs at least 3 (x, y) points, got shape {pts.shape}")
    a = np.column_stack([pts[:, 0], pts[:, 1], np.ones(pts.shape[0])])
    b = pts[:, 0] ** 2 + pts[:, 1] ** 2
    coef, _, rank, _ = np.linalg.lstsq(a, b, rcond=None)
    if rank < 3:
        raise GeometryError("points are collinear; no unique circle fit")
    cx = coef[0] / 2.0
    cy = coef[1] / 2.0
    r_sq = coef[2] + cx * cx + cy * cy
    if r_sq <= 0:
        raise GeometryError("degenerate circle fit (non-positive radius)")
    return float(cx), float(cy), float(np.sqrt(r_sq))


def feature_circles(fs: GeoFeatureSet) -> list[tuple[DetectionCircle, str]]:
    """Refit each ring to a circle; returns (circle, classification) pairs."""
    out = []
    names = sorted({f.classification for f in fs.features})
    index = {name: i for i, name in enumerate(names)}
    for feature in fs.features:
        cx, cy, r = fit_circle(feature.ring[:-1])
        score = min(max(feature.score, 0.0), 1.0)
        out.append(
            (
                DetectionCircle(cx, cy, r, score=score, category=index[feature.classification]),
                feature.classification,
            )
        )
    return out
