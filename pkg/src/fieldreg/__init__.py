"""Aerial-ground registration of colored crop-field point clouds.

Pipeline: rasterize both clouds into multimodal grid maps (excess-green,
height, anchor points), match them with a coarse-to-fine seed flow,
distill the flow into 3D correspondences by coherence voting, solve a
preliminary scale/rotation/translation map, and refine it with an affine
point-drift alignment on the vegetation subsets.
"""

from .errors import (
    ConfigError,
    DegenerateBoundsError,
    DegenerateCorrespondencesError,
    DescriptorFootprintError,
    EmptyCloudError,
    EmptyVegetationError,
    FieldRegError,
    GeotagMismatchError,
    InsufficientCorrespondencesError,
    InsufficientOverlapError,
    PlyParseError,
    PlySchemaError,
    SolverDivergenceError,
)
from .geometry import (
    AnisoAffine,
    ColoredGeoCloud,
    Correspondence3D,
    GeneralAffine,
    GeoPoint,
    RegistrationReport,
    apply_transform,
    compose,
    decompose,
)

__version__ = "0.1.0"
