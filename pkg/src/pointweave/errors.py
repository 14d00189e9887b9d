"""Exception taxonomy.

Data/format problems and numeric degeneracies are kept apart so the CLI
can map them to distinct exit codes.
"""

from __future__ import annotations


class PointweaveError(Exception):
    """Base class for everything raised deliberately by this package."""


class ValidationError(PointweaveError):
    """An argument violates a documented shape, range, or convention."""


class DimensionError(ValidationError):
    """A shape constraint (divisibility, agreement between arrays) failed."""


class FormatError(PointweaveError):
    """A serialized file violates its byte layout or schema."""


class DegenerateGeometryError(PointweaveError):
    """A geometric computation has no usable solution (all-invalid masks,
    vanishing denominators)."""


class AlignmentError(PointweaveError):
    """Scale alignment has no correspondences to work with."""


class PipelineError(PointweaveError):
    """A pipeline stage failed; carries the index of the offending frame."""

    def __init__(self, message: str, frame_index: int | None = None):
        super().__init__(message)
        self.frame_index = frame_index


class TrainingError(PointweaveError):
    """Optimization aborted. Carries the failing iteration and the last
    parameter snapshot that was still finite."""

    def __init__(self, message: str, iteration: int | None = None, checkpoint=None):
        super().__init__(message)
        self.iteration = iteration
        self.checkpoint = checkpoint
