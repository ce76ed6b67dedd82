"""Core geometric types: colored geotagged clouds and anisotropic affine maps.

The transform family used throughout is

    T(x) = diag(s) @ R @ x + t

with per-axis positive scales ``s``, a proper rotation ``R`` and a
translation ``t``.  Scaling is applied after rotation, so the scale axes
are the axes of the *target* (aerial) frame.  Products of two such maps
are generally not of the same form; they are represented by
:class:`GeneralAffine` and may be projected back via polar decomposition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import CloudValidationError, EmptyCloudError

_ROT_ORTHO_TOL = 1e-8


def _as_readonly(a, shape, name) -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.shape != shape:
        raise ValueError(f"{name} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    arr = arr.copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class GeoPoint:
    """One point: local ENU meters plus normalized color channels."""

    x: float
    y: float
    z: float
    r: float
    g: float
    b: float

    def __post_init__(self):
        for name in ("x", "y", "z"):
            if not math.isfinite(getattr(self, name)):
                raise CloudValidationError(f"coordinate {name} is not finite")
        for name in ("r", "g", "b"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise CloudValidationError(f"color channel {name}={v} outside [0, 1]")


@dataclass(frozen=True)
class ColoredGeoCloud:
    """Colored point cloud in a local east-north-up frame with a geotag.

    Attributes
    ----------
    xyz : (N, 3) float64
        Point positions in meters, local tangent plane at ``geo_origin``.
    rgb : (N, 3) float64
        Colors in [0, 1], same row order as ``xyz``.
    geo_origin : (lat_deg, lon_deg, alt_m)
        Geodetic anchor of the local frame origin.
    heading : float
        Yaw of the local frame versus true north, radians.  A point with
        local coordinates p sits at ENU position Rz(heading) @ p relative
        to the origin.
    """

    xyz: np.ndarray
    rgb: np.ndarray
    geo_origin: tuple[float, float, float]
    heading: float = 0.0

    def __post_init__(self):
        xyz = np.ascontiguousarray(self.xyz, dtype=np.float64)
        rgb = np.ascontiguousarray(self.rgb, dtype=np.float64)
        if xyz.ndim != 2 or xyz.shape[1] != 3:
            raise CloudValidationError(f"xyz must be (N, 3), got {xyz.shape}")
        if xyz.shape[0] == 0:
            raise EmptyCloudError("cloud has zero points")
        if rgb.shape != xyz.shape:
            raise CloudValidationError("rgb shape must match xyz")
        if not np.all(np.isfinite(xyz)):
            raise CloudValidationError("xyz contains non-finite values")
        if not np.all(np.isfinite(rgb)) or rgb.min() < 0.0 or rgb.max() > 1.0:
            raise CloudValidationError("rgb must be finite and within [0, 1]")
        lat, lon, alt = self.geo_origin
        if not (-90.0 <= lat <= 90.0):
            raise CloudValidationError(f"latitude {lat} outside [-90, 90]")
        if not (-180.0 <= lon <= 180.0):
            raise CloudValidationError(f"longitude {lon} outside [-180, 180]")
        if not math.isfinite(alt) or not math.isfinite(self.heading):
            raise CloudValidationError("altitude and heading must be finite")
        xyz.setflags(write=False)
        rgb.setflags(write=False)
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "rgb", rgb)

    def __len__(self) -> int:
        return self.xyz.shape[0]

    def point(self, i: int) -> GeoPoint:
        x, y, z = self.xyz[i]
        r, g, b = self.rgb[i]
        return GeoPoint(x, y, z, r, g, b)

    def with_xyz(self, xyz: np.ndarray) -> "ColoredGeoCloud":
        """Same colors and geotag, new positions."""
        return ColoredGeoCloud(xyz, self.rgb, self.geo_origin, self.heading)

    def select(self, index) -> "ColoredGeoCloud":
        return ColoredGeoCloud(self.xyz[index], self.rgb[index], self.geo_origin, self.heading)


@dataclass(frozen=True)
class AnisoAffine:
    """Anisotropic affine map x -> diag(scale) @ rotation @ x + translation."""

    scale: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        s = _as_readonly(self.scale, (3,), "scale")
        r = _as_readonly(self.rotation, (3, 3), "rotation")
        t = _as_readonly(self.translation, (3,), "translation")
        if np.any(s <= 0.0):
            raise ValueError(f"scales must be positive, got {s}")
        err = np.max(np.abs(r.T @ r - np.eye(3)))
        if err > _ROT_ORTHO_TOL:
            raise ValueError(f"rotation not orthonormal (deviation {err:.2e})")
        if np.linalg.det(r) < 0.0:
            raise ValueError("rotation has negative determinant (reflection)")
        object.__setattr__(self, "scale", s)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "AnisoAffine":
        return AnisoAffine(np.ones(3), np.eye(3), np.zeros(3))

    @staticmethod
    def rigid_z(angle: float, translation=(0.0, 0.0, 0.0)) -> "AnisoAffine":
        """Rigid map: rotation by ``angle`` about +z, then translation."""
        c, s = math.cos(angle), math.sin(angle)
        r = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return AnisoAffine(np.ones(3), r, np.asarray(translation, dtype=np.float64))

    @property
    def linear(self) -> np.ndarray:
        """The 3x3 linear part diag(scale) @ rotation."""
        return self.scale[:, None] * self.rotation

    def apply(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.linear.T + self.translation

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.linear
        m[:3, 3] = self.translation
        return m

    def to_general(self) -> "GeneralAffine":
        return GeneralAffine(self.linear, self.translation)

    def inverse(self):
        """Exact inverse.

        Returns an :class:`AnisoAffine` when the scale is isotropic (the
        inverse then stays in the family); otherwise a
        :class:`GeneralAffine`.
        """
        inv_lin = self.rotation.T * (1.0 / self.scale)[None, :]
        inv_t = -inv_lin @ self.translation
        if np.allclose(self.scale, self.scale[0], rtol=0.0, atol=1e-14):
            return AnisoAffine(1.0 / self.scale, self.rotation.T, inv_t)
        return GeneralAffine(inv_lin, inv_t)

    def is_identity(self, tol: float = 0.0) -> bool:
        return (
            np.max(np.abs(self.scale - 1.0)) <= tol
            and np.max(np.abs(self.rotation - np.eye(3))) <= tol
            and np.max(np.abs(self.translation)) <= tol
        )


@dataclass(frozen=True)
class GeneralAffine:
    """Unconstrained invertible affine map x -> linear @ x + translation."""

    linear: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        lin = _as_readonly(self.linear, (3, 3), "linear")
        t = _as_readonly(self.translation, (3,), "translation")
        object.__setattr__(self, "linear", lin)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def from_matrix(m: np.ndarray) -> "GeneralAffine":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"expected a 4x4 matrix, got {m.shape}")
        if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise ValueError("last row must be (0, 0, 0, 1)")
        return GeneralAffine(m[:3, :3], m[:3, 3])

    def apply(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.linear.T + self.translation

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.linear
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "GeneralAffine":
        inv_lin = np.linalg.inv(self.linear)
        return GeneralAffine(inv_lin, -inv_lin @ self.translation)

    def decompose(self) -> tuple["AnisoAffine", float]:
        """Project onto the scale-after-rotation family.

        Uses the left polar decomposition ``linear = P @ U`` with ``P``
        symmetric positive definite and ``U`` a rotation.  When ``P`` is
        (close to) diagonal the map is (close to) diag(s) @ R; the
        returned residual is the largest off-diagonal magnitude of ``P``
        relative to its largest diagonal entry, zero for an exact member
        of the family.

        Raises ``ValueError`` when the linear part is singular or
        orientation-reversing, since no positive-scale rotation can
        reproduce it.
        """
        u, sv, vt = np.linalg.svd(self.linear)
        if np.min(sv) <= 0.0 or np.linalg.det(self.linear) <= 0.0:
            raise ValueError("linear part is singular or orientation-reversing")
        rot = u @ vt
        if np.linalg.det(rot) < 0.0:
            u = u.copy()
            u[:, -1] = -u[:, -1]
            sv = sv.copy()
            sv[-1] = -sv[-1]
            rot = u @ vt
        p = (u * sv[None, :]) @ u.T  # symmetric factor, linear = p @ rot
        scale = np.diag(p).copy()
        off = p - np.diag(scale)
        residual = float(np.max(np.abs(off)) / np.max(np.abs(scale)))
        if np.any(scale <= 0.0):
            raise ValueError("polar factor has non-positive diagonal")
        # re-orthonormalize to absorb float drift before validation
        ur, _, vtr = np.linalg.svd(rot)
        rot = ur @ vtr
        return AnisoAffine(scale, rot, self.translation), residual


def compose(outer, inner) -> GeneralAffine:
    """Composition ``outer after inner``: compose(A, B).apply(x) == A.apply(B.apply(x)).

    Accepts any mix of :class:`AnisoAffine` and :class:`GeneralAffine`;
    the result is a :class:`GeneralAffine` since the anisotropic family
    is not closed under composition.
    """
    lo, to = outer.linear, outer.translation
    li, ti = inner.linear, inner.translation
    return GeneralAffine(lo @ li, lo @ ti + to)


def decompose(matrix: np.ndarray) -> tuple[AnisoAffine, float]:
    """Split a 4x4 affine matrix into (scale, rotation, translation) + shear residual."""
    return GeneralAffine.from_matrix(matrix).decompose()


def apply_transform(transform, cloud: ColoredGeoCloud) -> ColoredGeoCloud:
    """Map every point of ``cloud`` through ``transform``; colors and geotag ride along."""
    return cloud.with_xyz(transform.apply(cloud.xyz))


@dataclass(frozen=True)
class Correspondence3D:
    """A matched pair: ``p`` in the aerial cloud, ``q`` in the ground cloud."""

    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "p", _as_readonly(self.p, (3,), "p"))
        object.__setattr__(self, "q", _as_readonly(self.q, (3,), "q"))


def stack_correspondences(corr: Sequence[Correspondence3D]) -> tuple[np.ndarray, np.ndarray]:
    if len(corr) == 0:
        return np.empty((0, 3)), np.empty((0, 3))
    p = np.stack([c.p for c in corr])
    q = np.stack([c.q for c in corr])
    return p, q


@dataclass(frozen=True)
class RegistrationReport:
    """Outcome of a full registration run.

    The error fields are populated only when a reference transform was
    available for comparison; ``success`` is None in their absence.
    ``stage_refined`` is the polar projection of the exact refined map
    ``refined_matrix``; ``refined_exact`` records whether the projection
    residual was below the shear tolerance.
    """

    stage_initial: AnisoAffine
    stage_preliminary: AnisoAffine
    stage_refined: AnisoAffine
    refined_matrix: np.ndarray
    refined_exact: bool
    e_t: float | None = None
    e_R: float | None = None
    e_s: float | None = None
    success: bool | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.e_t is not None and not (self.e_t >= 0.0):
            raise ValueError("e_t must be non-negative")
        if self.e_R is not None and not (0.0 <= self.e_R <= math.pi + 1e-12):
            raise ValueError("e_R must lie in [0, pi]")
        if self.e_s is not None and not (self.e_s >= 0.0):
            raise ValueError("e_s must be non-negative")
