"""Exception types shared across the package."""


class CircleSegError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(CircleSegError):
    """Array or vertex-count mismatch between coupled inputs."""


class CoordinateRangeError(CircleSegError):
    """Sampling coordinate outside the grid."""


class EvaluationError(CircleSegError):
    """A checked function produced a non-finite value."""


class DomainError(CircleSegError):
    """Input outside the mathematical domain of an operation (log singularity)."""


class AnnotationError(CircleSegError):
    """Ground-truth geometry incompatible with the target grid."""


class GeometryError(CircleSegError):
    """Degenerate geometry (zero perimeter, empty ring)."""


class SchemaError(CircleSegError):
    """Malformed document; the message carries the offending JSON path."""


class IntegrityError(CircleSegError):
    """Dangling cross-reference inside an otherwise well-formed document."""


class SizingError(CircleSegError):
    """Requested tiling does not fit the given image dimensions."""


class GenerationError(CircleSegError):
    """Synthetic sample could not be produced within the attempt budget."""


class TrainingError(CircleSegError):
    """Training diverged; ``step`` holds the offending step index."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class AggregationError(CircleSegError):
    """Aggregate requested over an empty window list."""


class DegenerateInputError(CircleSegError):
    """Statistic undefined for the given data (zero variance, too few points)."""


class ExportError(CircleSegError):
    """Output document would contain invalid values."""
