"""Circle-instance segmentation for roughly circular objects in microscopy patches.

The package detects cells as circles (center heatmap + offset + radius heads),
refines each circle into a free-form contour with a deformation head, and
carries the results through a counting and correlation workflow: patch tiling,
COCO and GeoJSON interchange, field-of-view counting, and threshold sweeps.

Heavy inner loops (2-D convolution, circular convolution on contour rings) run
through a compiled extension when it is available and fall back to a pure
NumPy implementation otherwise; see :mod:`circleseg._kernels`.
"""

from . import _kernels
from .contour import (
    CircleContour,
    CircularKernel,
    DeformationHead,
    DeformationHeadConfig,
    VertexFeatures,
    circular_conv,
    contour_loss,
    deform_contour,
    deform_contour_train,
    gather_vertex_features,
    resample_polygon_uniform,
    sample_circle_vertices,
)
from .detection import (
    DetectionCircle,
    DetectionLossWeights,
    GaussianTargetConfig,
    GroundTruthCircle,
    Peak,
    decode_circles,
    detection_loss,
    extract_peaks,
    focal_loss,
    offset_loss,
    radius_loss,
    render_center_heatmap,
    render_regression_targets,
)
from .errors import (
    AggregationError,
    AnnotationError,
    CircleSegError,
    CoordinateRangeError,
    DegenerateInputError,
    DomainError,
    EvaluationError,
    ExportError,
    GenerationError,
    GeometryError,
    IntegrityError,
    SchemaError,
    ShapeError,
    SizingError,
    TrainingError,
)
from .evaluate import (
    CaseCounts,
    CaseRecord,
    CorrelationResult,
    HpfConfig,
    RegressionBand,
    SweepResult,
    aggregate_case,
    hpf_counts,
    pearson,
    regression_with_groups,
    threshold_sweep,
)
from .grid import Grid2D, GridSpec, bilinear_sample, finite_difference_check
from .matching import MatchStats, circle_iou, greedy_match, match_stats
from .model import (
    BackboneConfig,
    ToyBackbone,
    TrainConfig,
    TrainResult,
    TrainSample,
    calibrate_head,
    detect_circles,
    load_checkpoint,
    save_checkpoint,
    segment_instances,
    train,
)
from .synth import (
    PRESETS,
    SynthConfig,
    SynthSample,
    generate_dataset,
    generate_sample,
    shift_study,
    stain_shift,
    train_samples,
)
from .tiling import PatchPlan, axis_origins, merge_detections, plan_patches

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "_kernels",
    # contour
    "CircleContour",
    "CircularKernel",
    "DeformationHead",
    "DeformationHeadConfig",
    "VertexFeatures",
    "circular_conv",
    "contour_loss",
    "deform_contour",
    "deform_contour_train",
    "gather_vertex_features",
    "resample_polygon_uniform",
    "sample_circle_vertices",
    # detection
    "DetectionCircle",
    "DetectionLossWeights",
    "GaussianTargetConfig",
    "GroundTruthCircle",
    "Peak",
    "decode_circles",
    "detection_loss",
    "extract_peaks",
    "focal_loss",
    "offset_loss",
    "radius_loss",
    "render_center_heatmap",
    "render_regression_targets",
    # errors
    "AggregationError",
    "AnnotationError",
    "CircleSegError",
    "CoordinateRangeError",
    "DegenerateInputError",
    "DomainError",
    "EvaluationError",
    "ExportError",
    "GenerationError",
    "GeometryError",
    "IntegrityError",
    "SchemaError",
    "ShapeError",
    "SizingError",
    "TrainingError",
    # evaluation
    "CaseCounts",
    "CaseRecord",
    "CorrelationResult",
    "HpfConfig",
    "RegressionBand",
    "SweepResult",
    "aggregate_case",
    "hpf_counts",
    "pearson",
    "regression_with_groups",
    "threshold_sweep",
    # grids
    "Grid2D",
    "GridSpec",
    "bilinear_sample",
    "finite_difference_check",
    # matching
    "MatchStats",
    "circle_iou",
    "greedy_match",
    "match_stats",
    # model
    "BackboneConfig",
    "ToyBackbone",
    "TrainConfig",
    "TrainResult",
    "TrainSample",
    "calibrate_head",
    "detect_circles",
    "load_checkpoint",
    "save_checkpoint",
    "segment_instances",
    "train",
    # synthesis
    "PRESETS",
    "SynthConfig",
    "SynthSample",
    "generate_dataset",
    "generate_sample",
    "shift_study",
    "stain_shift",
    "train_samples",
    # tiling
    "PatchPlan",
    "axis_origins",
    "merge_detections",
    "plan_patches",
]
