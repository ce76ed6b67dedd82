"""Exception taxonomy for the registration pipeline.

Every failure mode that callers are expected to branch on gets its own
class; the CLI maps these onto process exit codes.
"""

from __future__ import annotations


class FieldRegError(Exception):
    """Base class for all pipeline errors.

    The ``stage`` attribute is filled in by the top-level pipeline driver
    so that a failure deep inside a stage can be attributed to it.
    """

    stage: str | None = None


class PlyParseError(FieldRegError):
    """Malformed PLY header or truncated payload."""


class PlySchemaError(FieldRegError):
    """PLY file lacks the required vertex properties."""


class EmptyCloudError(FieldRegError):
    """A cloud with zero points where at least one is required."""


class CloudValidationError(FieldRegError):
    """Point cloud fields violate their value constraints."""


class SidecarError(FieldRegError):
    """Geotag sidecar file missing or malformed."""


class GeotagMismatchError(FieldRegError):
    """Geotagged origins are too far apart to be the same site."""


class DegenerateBoundsError(FieldRegError):
    """Explicit rasterization bounds enclose zero area."""


class DescriptorFootprintError(FieldRegError):
    """Grid map smaller than the descriptor support window."""


class InsufficientOverlapError(FieldRegError):
    """Grid maps share too little area for flow matching."""


class InsufficientCorrespondencesError(FieldRegError):
    """Fewer matched point pairs than the solver needs."""


class DegenerateCorrespondencesError(FieldRegError):
    """Correspondence geometry leaves part of the transform unobservable."""

    def __init__(self, message: str, axis=None):
        super().__init__(message)
        self.axis = axis


class SolverDivergenceError(FieldRegError):
    """Iterative refinement produced a non-finite or collapsing estimate."""


class EmptyVegetationError(FieldRegError):
    """Vegetation filtering removed every point."""


class ConfigError(FieldRegError):
    """Unknown or unparseable configuration key."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key
