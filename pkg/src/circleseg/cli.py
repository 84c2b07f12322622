"""Command-line pipeline driver.

Subcommands: synth, train, infer, eval, shift-study, convert. Every run
writes a manifest.json next to its outputs holding the fully merged config;
feeding that manifest back through --config (with a fresh --out) reproduces
the run's output files byte for byte. Precedence: built-in defaults, then the
config file, then explicit flags. The CIRCLESEG_OUT environment variable
supplies a default output root when --out is omitted.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, _kernels
from .coco import annotation_set_from_truth, load_coco, save_coco, AnnotationSet, CocoAnnotation, CocoImage
from .contour import DeformationHead, DeformationHeadConfig, sample_circle_vertices
from .detection import DetectionCircle
from .errors import CircleSegError, IntegrityError
from .evaluate import (
    CaseRecord,
    HpfConfig,
    SWEEP_METRICS,
    SWEEP_THRESHOLDS,
    regression_with_groups,
    threshold_sweep,
)
from .geojson import (
    GeoFeature,
    GeoFeatureSet,
    export_geojson,
    feature_circles,
    parse_geojson,
    serialize_feature_set,
)
from .model import (
    BackboneConfig,
    ToyBackbone,
    TrainConfig,
    TrainSample,
    detect_circles,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .raster import read_raster, write_raster
from .report import (
    read_detections_csv,
    read_human_counts_csv,
    svg_regression_figure,
    svg_shift_curve,
    write_case_counts_csv,
    write_correlation_csv,
    write_detections_csv,
    write_group_labels_csv,
    write_loss_trace_csv,
    write_shift_curve_csv,
)
from .synth import PRESETS, SynthConfig, generate_dataset, shift_study


class UsageError(Exception):
    """Bad invocation or config; maps to exit code 2."""


_DEFAULTS: dict[str, dict] = {
    "synth": {
        "preset": None,
        "count": 20,
        "patch_size": 64,
        "cell_count_range": [2, 6],
        "radius_range": [4.0, 9.0],
        "cell_intensity": 0.75,
        "background_luminance": 0.85,
        "texture_noise_sd": 0.02,
        "seed": 0,
    },
    "train": {
        "dataset": None,
        "steps": 200,
        "learning_rate": 0.008,
        "batch_size": 16,
        "seed": 0,
        "backbone_width": 16,
        "head_width": 24,
        "downsample": 4,
        "vertex_count": 128,
        "contour_iterations": 3,
        "contours_per_step": 1,
    },
    "infer": {
        "checkpoint": None,
        "dataset": None,
        "ct_score": 0.15,
        "top_n": 100,
        "polygon_vertices": 128,
        "class_name": "cell",
    },
    "eval": {
        "detections": None,
        "human": None,
        "case_width": 1024,
        "case_height": 1024,
        "hpf_width": 1024,
        "hpf_height": 1024,
        "hpf_stride": 1024,
        "disjoint_top5": True,
        "confidence": 0.95,
        "figure_metric": "top5_mean",
        "figure_threshold": 0.15,
    },
    "shift-study": {
        "checkpoint": None,
        "preset": None,
        "count": 25,
        "patch_size": 64,
        "cell_count_range": [2, 6],
        "radius_range": [4.0, 9.0],
        "cell_intensity": 0.75,
        "background_luminance": 0.85,
        "texture_noise_sd": 0.02,
        "seed": 1000,
        "shifts": [0.0, 0.075, 0.15, 0.225, 0.3],
        "ct_score": 0.15,
        "iou_threshold": 0.5,
        "top_n": 100,
    },
    "convert": {
        "input": None,
        "output": None,
        "class_name": "cell",
        "polygon_vertices": 128,
        "default_score": 1.0,
    },
}

_SYNTH_PRESET_KEYS = (
    "patch_size",
    "cell_count_range",
    "radius_range",
    "cell_intensity",
    "background_luminance",
    "texture_noise_sd",
)


def _load_config_file(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    # A manifest from a previous run is accepted directly.
    if "config" in doc and "command" in doc:
        inner = doc["config"]
        if not isinstance(inner, dict):
            raise UsageError(f"manifest {path} has a malformed config block")
        return inner
    return doc


def _merge_config(command: str, args: argparse.Namespace) -> dict:
    merged = dict(_DEFAULTS[command])
    file_values: dict = {}
    if getattr(args, "config", None):
        file_values = _load_config_file(args.config)
        for key in file_values:
            if key not in merged:
                raise UsageError(f"unknown config field '{key}' for command {command}")
    flag_values = {
        key: value
        for key, value in vars(args).items()
        if key in merged and value is not None
    }
    preset = flag_values.get("preset", file_values.get("preset"))
    if preset is not None:
        if preset not in PRESETS:
            raise UsageError(f"unknown preset '{preset}'; choose from {sorted(PRESETS)}")
        preset_cfg = PRESETS[preset]
        for key in _SYNTH_PRESET_KEYS:
            value = getattr(preset_cfg, key)
            merged[key] = list(value) if isinstance(value, tuple) else value
        merged["preset"] = preset
    merged.update(file_values)
    merged.update(flag_values)
    return merged


def _field(cfg: dict, key: str, kind, command: str):
    value = cfg.get(key)
    if value is None:
        raise UsageError(f"missing config field '{key}' for command {command}")
    try:
        return kind(value)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"config field '{key}' is invalid: {exc}") from exc


def _pair(value, kind) -> tuple:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ValueError(f"expected a [lo, hi] pair, got {value!r}")
    return (kind(value[0]), kind(value[1]))


def _resolve_out(args: argparse.Namespace, command: str) -> Path:
    if getattr(args, "out", None):
        out = Path(args.out)
    else:
        root = os.environ.get("CIRCLESEG_OUT")
        if not root:
            raise UsageError("--out is required (or set CIRCLESEG_OUT)")
        out = Path(root) / command
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(
    out_dir: Path, command: str, config: dict, outputs: list[str], started: float
) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "kernel_backend": _kernels.active_backend(),
        "config": config,
        "outputs": sorted(outputs),
        "duration_seconds": time.perf_counter() - started,
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _synth_config(cfg: dict, command: str) -> SynthConfig:
    try:
        return SynthConfig(
            patch_size=_field(cfg, "patch_size", int, command),
            cell_count_range=_pair(cfg["cell_count_range"], int),
            radius_range=_pair(cfg["radius_range"], float),
            cell_intensity=_field(cfg, "cell_intensity", float, command),
            background_luminance=_field(cfg, "background_luminance", float, command),
            texture_noise_sd=_field(cfg, "texture_noise_sd", float, command),
            seed=_field(cfg, "seed", int, command),
        )
    except (KeyError, ValueError) as exc:
        raise UsageError(f"invalid synth parameters: {exc}") from exc


def cmd_synth(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    command = "synth"
    cfg = _merge_config(command, args)
    out_dir = _resolve_out(args, command)
    synth_cfg = _synth_config(cfg, command)
    count = _field(cfg, "count", int, command)

    samples = generate_dataset(synth_cfg, count)
    outputs: list[str] = []
    entries = []
    human_rows = []
    for i, sample in enumerate(samples):
        name = f"sample_{i:04d}.pras"
        write_raster(out_dir / name, sample.image)
        outputs.append(name)
        entries.append((name, synth_cfg.patch_size, synth_cfg.patch_size, sample.truth))
        human_rows.append((name, len(sample.truth)))

    save_coco(annotation_set_from_truth(entries), out_dir / "truth.json")
    outputs.append("truth.json")

    with open(out_dir / "human_counts.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("case_id,human_top5_mean,human_max\n")
        for name, n in human_rows:
            fh.write(f"{name},{float(n)!r},{float(n)!r}\n")
    outputs.append("human_counts.csv")

    _write_manifest(out_dir, command, cfg, outputs, started)
    print(f"wrote {count} samples to {out_dir}")
    return 0


def _load_dataset(dataset_dir: Path) -> tuple[list[TrainSample], int, int]:
    truth_path = dataset_dir / "truth.json"
    if not truth_path.exists():
        raise UsageError(f"dataset {dataset_dir} has no truth.json")
    aset = load_coco(truth_path)
    samples = []
    dims = None
    for image_id in sorted(aset.images):
        img = aset.images[image_id]
        raster = read_raster(dataset_dir / img.file_name)
        if dims is None:
            dims = (img.width, img.height, raster.channels)
        elif dims[:2] != (img.width, img.height):
            raise UsageError("all dataset images must share the same dimensions")
        circles = aset.truth_circles(image_id)
        if not circles:
            raise UsageError(f"image {img.file_name} has no circles; cannot train on it")
        samples.append(TrainSample(image=raster, circles=tuple(circles)))
    if not samples or dims is None:
        raise UsageError(f"dataset {dataset_dir} holds no images")
    return samples, dims[0], dims[2]


def cmd_train(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    command = "train"
    cfg = _merge_config(command, args)
    out_dir = _resolve_out(args, command)
    dataset_dir = Path(_field(cfg, "dataset", str, command))
    samples, patch_size, channels = _load_dataset(dataset_dir)

    downsample = _field(cfg, "downsample", int, command)
    backbone = ToyBackbone(
        BackboneConfig(
            input_width=patch_size,
            input_height=patch_size,
            in_channels=channels,
            width=_field(cfg, "backbone_width", int, command),
            downsample=downsample,
            seed=_field(cfg, "seed", int, command),
        )
    )
    head = DeformationHead(
        DeformationHeadConfig(
            feature_channels=backbone.config.width,
            width=_field(cfg, "head_width", int, command),
            seed=_field(cfg, "seed", int, command) + 1,
        )
    )
    train_cfg = TrainConfig(
        learning_rate=_field(cfg, "learning_rate", float, command),
        steps=_field(cfg, "steps", int, command),
        batch_size=_field(cfg, "batch_size", int, command),
        seed=_field(cfg, "seed", int, command),
        vertex_count=_field(cfg, "vertex_count", int, command),
        contour_iterations=_field(cfg, "contour_iterations", int, command),
        contours_per_step=_field(cfg, "contours_per_step", int, command),
    )
    result = train(backbone, head, samples, train_cfg)

    save_checkpoint(out_dir / "checkpoint.bin", backbone, head)
    write_loss_trace_csv(out_dir / "loss_trace.csv", result)
    _write_manifest(out_dir, command, cfg, ["checkpoint.bin", "loss_trace.csv"], started)
    final = result.loss_trace[-1] if result.steps else float("nan")
    print(f"trained {train_cfg.steps} steps; final loss {final:.4f}; wrote {out_dir}")
    return 0


def cmd_infer(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    command = "infer"
    cfg = _merge_config(command, args)
    out_dir = _resolve_out(args, command)
    backbone, _head = load_checkpoint(_field(cfg, "checkpoint", str, command))

    dataset = Path(_field(cfg, "dataset", str, command))
    if dataset.is_dir():
        patches = sorted(dataset.glob("*.pras"))
        if not patches:
            raise UsageError(f"no .pras patches found in {dataset}")
    elif dataset.exists():
        patches = [dataset]
    else:
        raise UsageError(f"dataset path {dataset} does not exist")

    ct_score = _field(cfg, "ct_score", float, command)
    top_n = _field(cfg, "top_n", int, command)
    vertices = _field(cfg, "polygon_vertices", int, command)
    class_name = _field(cfg, "class_name", str, command)

    outputs: list[str] = []
    rows: list[tuple[str, DetectionCircle]] = []
    for patch_path in patches:
        image = read_raster(patch_path)
        detections = detect_circles(backbone, image, top_n=top_n, ct_score=ct_score)
        _, doc = export_geojson(detections, polygon_vertices=vertices, class_name=class_name)
        name = patch_path.stem + ".geojson"
        (out_dir / name).write_text(doc, encoding="utf-8")
        outputs.append(name)
        rows.extend((patch_path.name, det) for det in detections)

    write_detections_csv(out_dir / "detections.csv", rows)
    outputs.append("detections.csv")
    _write_manifest(out_dir, command, cfg, outputs, started)
    print(f"{len(rows)} detections over {len(patches)} patches; wrote {out_dir}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    command = "eval"
    cfg = _merge_config(command, args)
    out_dir = _resolve_out(args, command)

    detections = read_detections_csv(_field(cfg, "detections", str, command))
    human = read_human_counts_csv(_field(cfg, "human", str, command))

    by_case: dict[str, list[DetectionCircle]] = {cid: [] for cid in human}
    for case_id, det in detections:
        if case_id not in by_case:
            raise IntegrityError(f"detections reference unknown case '{case_id}'")
        by_case[case_id].append(det)

    width = _field(cfg, "case_width", int, command)
    height = _field(cfg, "case_height", int, command)
    hpf = HpfConfig(
        hpf_width=_field(cfg, "hpf_width", int, command),
        hpf_height=_field(cfg, "hpf_height", int, command),
        stride=_field(cfg, "hpf_stride", int, command),
    )
    cases = [
        CaseRecord(
            case_id=cid,
            detections=tuple(by_case[cid]),
            wsi_width=width,
            wsi_height=height,
            human_top5_mean=human[cid][0],
            human_max=human[cid][1],
        )
        for cid in sorted(human)
    ]
    disjoint = bool(cfg.get("disjoint_top5", True))
    sweep = threshold_sweep(cases, hpf, disjoint=disjoint)

    write_correlation_csv(out_dir / "correlation.csv", sweep.correlations)
    write_case_counts_csv(out_dir / "case_counts.csv", sweep.counts)

    metric = _field(cfg, "figure_metric", str, command)
    if metric not in SWEEP_METRICS:
        raise UsageError(f"figure_metric must be one of {SWEEP_METRICS}")
    threshold = _field(cfg, "figure_threshold", float, command)
    if threshold not in SWEEP_THRESHOLDS:
        raise UsageError(f"figure_threshold must be one of {SWEEP_THRESHOLDS}")
    rows = sweep.counts[threshold]
    if metric == "top5_mean":
        x = [c.human_top5_mean for c in rows]
        y = [c.machine_top5_mean for c in rows]
    else:
        x = [c.human_max for c in rows]
        y = [c.machine_max for c in rows]
    band = regression_with_groups(x, y, confidence=_field(cfg, "confidence", float, command))
    write_group_labels_csv(out_dir / "group_labels.csv", [c.case_id for c in rows], x, y, band)
    (out_dir / "regression.svg").write_text(svg_regression_figure(x, y, band), encoding="utf-8")

    outputs = ["correlation.csv", "case_counts.csv", "group_labels.csv", "regression.svg"]
    _write_manifest(out_dir, command, cfg, outputs, started)
    print(f"evaluated {len(cases)} cases; wrote {out_dir}")
    return 0


def cmd_shift_study(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    command = "shift-study"
    cfg = _merge_config(command, args)
    out_dir = _resolve_out(args, command)
    backbone, _head = load_checkpoint(_field(cfg, "checkpoint", str, command))

    synth_cfg = _synth_config(cfg, command)
    samples = generate_dataset(synth_cfg, _field(cfg, "count", int, command))
    raw_shifts = cfg.get("shifts")
    if not isinstance(raw_shifts, list) or not raw_shifts:
        raise UsageError("config field 'shifts' must be a non-empty list of magnitudes")
    shifts = tuple((-float(m), -float(m)) for m in raw_shifts)

    points = shift_study(
        backbone,
        samples,
        shifts=shifts,
        iou_threshold=_field(cfg, "iou_threshold", float, command),
        ct_score=_field(cfg, "ct_score", float, command),
        top_n=_field(cfg, "top_n", int, command),
    )
    write_shift_curve_csv(out_dir / "shift_curve.csv", points)
    (out_dir / "shift_curve.svg").write_text(svg_shift_curve(points), encoding="utf-8")
    _write_manifest(out_dir, command, cfg, ["shift_curve.csv", "shift_curve.svg"], started)
    zero = points[0].f1
    last = points[-1].f1
    print(f"F1 {zero:.3f} at zero shift, {last:.3f} at max shift; wrote {out_dir}")
    return 0


def _coco_to_geojson(aset: AnnotationSet, cfg: dict) -> str:
    detections = []
    names = []
    default_score = float(cfg["default_score"])
    for ann in sorted(aset.annotations.values(), key=lambda a: a.id):
        if ann.circle is None:
            continue
        cx, cy, r = ann.circle
        score = default_score if ann.score is None else ann.score
        detections.append(DetectionCircle(cx, cy, r, score=min(max(score, 0.0), 1.0)))
        names.append(aset.categories[ann.category_id])

    fs = GeoFeatureSet()
    vertices = int(cfg["polygon_vertices"])
    for det, name in zip(detections, names):
        ring = sample_circle_vertices(det, vertices).vertices
        fs.features.append(
            GeoFeature(ring=np.vstack([ring, ring[:1]]), classification=name, score=det.score)
        )
    return serialize_feature_set(fs)


def _geojson_to_coco(text: str) -> AnnotationSet:
    fs = parse_geojson(text)
    circles = feature_circles(fs)
    names = sorted({name for _, name in circles})
    categories = {i + 1: name for i, name in enumerate(names)}
    max_x = max((c.center_x + c.radius for c, _ in circles), default=1.0)
    max_y = max((c.center_y + c.radius for c, _ in circles), default=1.0)
    images = {1: CocoImage(1, "converted", int(np.ceil(max_x)) + 1, int(np.ceil(max_y)) + 1)}
    annotations = {}
    for i, (circle, name) in enumerate(circles):
        annotations[i + 1] = CocoAnnotation(
            id=i + 1,
            image_id=1,
            category_id=names.index(name) + 1,
            circle=(circle.center_x, circle.center_y, circle.radius),
            score=circle.score,
        )
    return AnnotationSet(images=images, annotations=annotations, categories=categories)


def cmd_convert(args: argparse.Namespace) -> int:
    started = time.perf_counter()
    command = "convert"
    cfg = _merge_config(command, args)
    out_dir = _resolve_out(args, command)
    src = Path(_field(cfg, "input", str, command))
    dst_name = _field(cfg, "output", str, command)
    if not src.exists():
        raise UsageError(f"input file {src} does not exist")

    if src.suffix == ".geojson":
        aset = _geojson_to_coco(src.read_text(encoding="utf-8"))
        save_coco(aset, out_dir / dst_name)
    else:
        doc = _coco_to_geojson(load_coco(src), cfg)
        (out_dir / dst_name).write_text(doc, encoding="utf-8")
    _write_manifest(out_dir, command, cfg, [dst_name], started)
    print(f"converted {src} -> {out_dir / dst_name}")
    return 0


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file (a manifest.json also works)")
    parser.add_argument("--out", help="output directory (default: $CIRCLESEG_OUT/<command>)")


def _float_list(text: str) -> list[float]:
    return [float(part) for part in text.split(",") if part.strip() != ""]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="circleseg",
        description="Circle-instance segmentation pipeline on synthetic microscopy patches.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--count", type=int)
    p.add_argument("--patch-size", dest="patch_size", type=int)
    p.add_argument("--cell-intensity", dest="cell_intensity", type=float)
    p.add_argument("--background-luminance", dest="background_luminance", type=float)
    p.add_argument("--texture-noise-sd", dest="texture_noise_sd", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the toy model on a dataset directory")
    _add_common(p)
    p.add_argument("--dataset")
    p.add_argument("--steps", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--backbone-width", dest="backbone_width", type=int)
    p.add_argument("--head-width", dest="head_width", type=int)
    p.add_argument("--downsample", type=int)
    p.add_argument("--vertex-count", dest="vertex_count", type=int)
    p.add_argument("--contour-iterations", dest="contour_iterations", type=int)
    p.add_argument("--contours-per-step", dest="contours_per_step", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run detection over patches and export GeoJSON")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--dataset", help="dataset directory or a single .pras file")
    p.add_argument("--ct-score", dest="ct_score", type=float)
    p.add_argument("--top-n", dest="top_n", type=int)
    p.add_argument("--polygon-vertices", dest="polygon_vertices", type=int)
    p.add_argument("--class-name", dest="class_name")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="correlate machine counts against human counts")
    _add_common(p)
    p.add_argument("--detections", help="detections CSV from infer")
    p.add_argument("--human", help="human counts CSV")
    p.add_argument("--case-width", dest="case_width", type=int)
    p.add_argument("--case-height", dest="case_height", type=int)
    p.add_argument("--hpf-width", dest="hpf_width", type=int)
    p.add_argument("--hpf-height", dest="hpf_height", type=int)
    p.add_argument("--hpf-stride", dest="hpf_stride", type=int)
    p.add_argument("--confidence", type=float)
    p.add_argument("--figure-metric", dest="figure_metric", choices=list(SWEEP_METRICS))
    p.add_argument("--figure-threshold", dest="figure_threshold", type=float)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("shift-study", help="measure F1 degradation under appearance shift")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--count", type=int)
    p.add_argument("--patch-size", dest="patch_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--shifts", type=_float_list, help="comma-separated shift magnitudes")
    p.add_argument("--ct-score", dest="ct_score", type=float)
    p.add_argument("--top-n", dest="top_n", type=int)
    p.set_defaults(func=cmd_shift_study)

    p = sub.add_parser("convert", help="convert COCO truth to GeoJSON or back")
    _add_common(p)
    p.add_argument("--input")
    p.add_argument("--output", help="output file name inside --out")
    p.add_argument("--class-name", dest="class_name")
    p.add_argument("--polygon-vertices", dest="polygon_vertices", type=int)
    p.set_defaults(func=cmd_convert)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CircleSegError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
