"""Synthetic crop-field generation with known ground-truth transforms.

Fields are a gently undulating soil carpet plus hemispherical plant
canopies on a regular row lattice; canopies hide the soil beneath them
the way a reconstructed survey surface does.  A derived ground view
crops a sub-rectangle, resamples it at its own density, and moves it by
the inverse of a sampled transform, so the exact transform that
registers it back is known and returned alongside.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .cloud_io import _EARTH_RADIUS_M
from .errors import EmptyCloudError
from .geometry import AnisoAffine, ColoredGeoCloud

# fixed geodetic anchor for all generated fields
FIELD_ORIGIN = (47.3769, 8.5417, 408.0)

# ground rigs cover a fraction of the surveyed field
CROP_FRACTION = 0.6


@dataclass(frozen=True)
class FieldSpec:
    """Geometry, appearance, and sampling parameters of a synthetic field.

    extent is the side length of the square field in meters.  Plant
    canopies are hemispheres of plant_radius flattened or stretched to
    plant_height, planted every plant_spacing along rows every
    row_spacing.  Excess-green values are drawn per class around the
    configured means; per-axis position noise is Gaussian noise_sigma.
    """

    extent: float = 10.0
    row_spacing: float = 0.5
    # canopies slightly wider than the in-row pitch merge into the
    # continuous crop ridges real row fields show
    plant_spacing: float = 0.3
    plant_radius: float = 0.15
    plant_height: float = 0.3
    # sowing scatter around the lattice sites; an exactly periodic field
    # would let a stretched alignment re-lock plant against wrong plant
    plant_jitter: float = 0.03
    crop_exg_mean: float = 0.8
    crop_exg_std: float = 0.1
    soil_exg_mean: float = 0.0
    soil_exg_std: float = 0.03
    missing_plant_rate: float = 0.0
    # photogrammetric survey densities; sparse clouds leave many grid
    # cells without nearby points and starve the correspondence stage
    point_density_aerial: float = 1500.0
    point_density_ground: float = 4000.0
    noise_sigma: float = 0.005
    # gentle microtopography amplitude; both views share it, which is
    # what makes the vertical scale observable over near-planar soil
    soil_relief: float = 0.02

    def __post_init__(self):
        if self.extent <= 0:
            raise ValueError("extent must be positive")
        if min(self.row_spacing, self.plant_spacing) <= 0:
            raise ValueError("spacings must be positive")
        if min(self.plant_radius, self.plant_height) <= 0:
            raise ValueError("plant dimensions must be positive")
        if not 0.0 <= self.missing_plant_rate <= 1.0:
            raise ValueError("missing_plant_rate must lie in [0, 1]")
        if min(self.point_density_aerial, self.point_density_ground) <= 0:
            raise ValueError("densities must be positive")
        if min(self.crop_exg_std, self.soil_exg_std) < 0 or self.noise_sigma < 0:
            raise ValueError("spreads must be non-negative")
        if self.plant_jitter < 0:
            raise ValueError("plant_jitter must be non-negative")
        if self.soil_relief < 0:
            raise ValueError("soil_relief must be non-negative")


@dataclass(frozen=True)
class PerturbationSpec:
    """Magnitudes of the misalignment a derived ground view starts from.

    dt is planar translation in meters (direction sampled), dpsi heading
    in radians (sign sampled), ds per-axis fractional scale error
    (applied as 1 + ds), geotag_bias extra GPS error in meters.
    """

    dt: float = 0.0
    dpsi: float = 0.0
    ds: tuple[float, float, float] = (0.0, 0.0, 0.0)
    geotag_bias: float = 0.0

    def __post_init__(self):
        ds = tuple(float(d) for d in self.ds)
        if len(ds) != 3:
            raise ValueError("ds must have one entry per axis")
        object.__setattr__(self, "ds", ds)
        if self.dt < 0 or self.dpsi < 0 or self.geotag_bias < 0:
            raise ValueError("perturbation magnitudes must be non-negative")
        if min(ds) < 0:
            raise ValueError("scale-error magnitudes must be non-negative")


def _exg_to_rgb(e: np.ndarray) -> np.ndarray:
    # 2g - r - b recovers e exactly when r = b; valid over e in [-2, 2]
    e = np.clip(e, -2.0, 2.0)
    g = 0.5 + e / 4.0
    rb = 0.5 - e / 4.0
    return np.stack([rb, g, rb], axis=1)


def generate_field(spec: FieldSpec, rng_seed: int) -> ColoredGeoCloud:
    """Soil carpet plus plant canopies, deterministic under rng_seed.

    Plant sites form a floor(extent / row_spacing) by
    floor(extent / plant_spacing) lattice offset half a spacing from the
    field edge; each site is dropped with probability missing_plant_rate
    and otherwise gets its own size and greenness variation, which is
    what makes the rasterized appearance locally distinctive.  Points
    sample the visible top surface only: soil under a canopy and the
    lower dome where canopies overlap yield no points.
    """
    rng = np.random.default_rng(rng_seed)
    n_rows = int(spec.extent / spec.row_spacing)
    n_per_row = int(spec.extent / spec.plant_spacing)
    if n_rows < 1:
        raise ValueError(
            f"extent {spec.extent} m cannot contain one row at "
            f"{spec.row_spacing} m spacing"
        )

    # smooth microtopography with wavelengths incommensurate with the
    # planting lattice; random phases keep fields from sharing terrain
    phase = rng.uniform(0.0, 2.0 * math.pi, size=2)

    def relief(x, y):
        return 0.5 * spec.soil_relief * (
            np.sin(2.0 * math.pi * x / 1.3 + phase[0])
            + np.cos(2.0 * math.pi * y / 2.1 + phase[1])
        )

    n_soil = int(rng.poisson(spec.point_density_aerial * spec.extent**2))
    soil_xy = rng.uniform(0.0, spec.extent, size=(n_soil, 2))
    soil_exg = rng.normal(spec.soil_exg_mean, spec.soil_exg_std, size=len(soil_xy))

    ys, xs = np.meshgrid(np.arange(n_rows), np.arange(n_per_row), indexing="ij")
    sites = np.column_stack(
        [(xs.ravel() + 0.5) * spec.plant_spacing, (ys.ravel() + 0.5) * spec.row_spacing]
    )
    sites = sites + rng.normal(0.0, spec.plant_jitter, size=sites.shape)
    present = rng.random(len(sites)) >= spec.missing_plant_rate
    radii = spec.plant_radius * rng.uniform(0.75, 1.25, size=len(sites))
    heights = spec.plant_height * rng.uniform(0.75, 1.25, size=len(sites))

    # canopies occlude the soil beneath them: surveys reconstruct the top
    # surface, so a surface sample never lands under a canopy
    if present.any() and n_soil:
        tree = cKDTree(soil_xy)
        covered = set()
        for k in np.flatnonzero(present):
            covered.update(tree.query_ball_point(sites[k], radii[k]))
        if covered:
            keep = np.ones(n_soil, dtype=bool)
            keep[np.fromiter(covered, dtype=np.int64)] = False
            soil_xy = soil_xy[keep]
            soil_exg = soil_exg[keep]
    soil = np.column_stack([soil_xy, relief(soil_xy[:, 0], soil_xy[:, 1])])
    # split the class variance between a per-plant offset and per-point
    # noise so the marginal spread still equals crop_exg_std
    plant_tint = rng.normal(0.0, spec.crop_exg_std / math.sqrt(2.0), size=len(sites))

    present_idx = np.flatnonzero(present)
    site_tree = cKDTree(sites[present_idx]) if len(present_idx) else None
    r_reach = radii[present_idx].max() if len(present_idx) else 0.0

    pts = [soil]
    exgs = [soil_exg]
    for k in present_idx:
        # a planted site always contributes at least one canopy point, so
        # site counts stay exact under sparse sampling densities
        n_pts = max(
            1, int(rng.poisson(spec.point_density_aerial * math.pi * radii[k] ** 2))
        )
        frac = np.sqrt(rng.random(n_pts))
        ang = rng.uniform(0.0, 2.0 * math.pi, size=n_pts)
        x = sites[k, 0] + radii[k] * frac * np.cos(ang)
        y = sites[k, 1] + radii[k] * frac * np.sin(ang)
        z = heights[k] * np.sqrt(np.maximum(0.0, 1.0 - frac**2))
        z += relief(sites[k, 0], sites[k, 1])
        # where canopies overlap only the upper dome is visible
        keep = np.ones(n_pts, dtype=bool)
        for j in sorted(site_tree.query_ball_point(sites[k], radii[k] + r_reach)):
            j = present_idx[j]
            if j == k:
                continue
            d2 = (x - sites[j, 0]) ** 2 + (y - sites[j, 1]) ** 2
            under = d2 < radii[j] ** 2
            if under.any():
                dome = heights[j] * np.sqrt(1.0 - d2[under] / radii[j] ** 2)
                dome += relief(sites[j, 0], sites[j, 1])
                keep[under] &= z[under] >= dome
        if not keep.any():
            keep[int(np.argmax(z))] = True
        n_kept = int(np.count_nonzero(keep))
        pts.append(np.column_stack([x[keep], y[keep], z[keep]]))
        exgs.append(
            spec.crop_exg_mean
            + plant_tint[k]
            + rng.normal(0.0, spec.crop_exg_std / math.sqrt(2.0), size=n_kept)
        )

    xyz = np.concatenate(pts, axis=0)
    xyz += rng.normal(0.0, spec.noise_sigma, size=xyz.shape)
    rgb = _exg_to_rgb(np.concatenate(exgs))
    return ColoredGeoCloud(xyz, rgb, FIELD_ORIGIN, heading=0.0)


def derive_ground_view(
    field: ColoredGeoCloud,
    spec: FieldSpec,
    perturb: PerturbationSpec,
    rng_seed: int,
) -> tuple[ColoredGeoCloud, AnisoAffine]:
    """Ground-rig view of a field plus the transform registering it back.

    Crops a random CROP_FRACTION sub-square, resamples it with
    replacement at the ground density with fresh position noise, then
    moves it by the inverse of the sampled truth transform.  Scale and
    rotation act about the ground view's own centroid, so dt is the
    actual displacement of the viewed area.  The geotag keeps the field
    origin (up to geotag_bias), which makes the sampled transform
    exactly the initial misalignment the pipeline must recover.
    """
    rng = np.random.default_rng(rng_seed)
    side = CROP_FRACTION * spec.extent
    off = rng.uniform(0.0, spec.extent - side, size=2)
    xyz = field.xyz
    mask = (
        (xyz[:, 0] >= off[0])
        & (xyz[:, 0] <= off[0] + side)
        & (xyz[:, 1] >= off[1])
        & (xyz[:, 1] <= off[1] + side)
    )
    n_crop = int(np.count_nonzero(mask))
    if n_crop == 0:
        raise EmptyCloudError("crop sub-rectangle contains no points")
    crop_xyz = xyz[mask]
    crop_rgb = field.rgb[mask]

    n_ground = max(4, int(round(spec.point_density_ground * side * side)))
    idx = rng.integers(0, n_crop, size=n_ground)
    sampled = crop_xyz[idx] + rng.normal(0.0, spec.noise_sigma, size=(n_ground, 3))
    rgb = crop_rgb[idx]

    theta = rng.uniform(0.0, 2.0 * math.pi)
    t = perturb.dt * np.array([math.cos(theta), math.sin(theta), 0.0])
    sign = 1.0 if rng.random() < 0.5 else -1.0
    rot = AnisoAffine.rigid_z(sign * perturb.dpsi).rotation
    scale = 1.0 + np.asarray(perturb.ds, dtype=np.float64)

    # truth T(y) = S R (y - g) + g + t with g placed so that g is the
    # ground view's centroid: g = mean(sampled) - t
    center = sampled.mean(axis=0)
    translation = center - scale * (rot @ (center - t))
    truth = AnisoAffine(scale=scale, rotation=rot, translation=translation)
    ground_xyz = ((sampled - center) / scale) @ rot + (center - t)

    lat, lon, alt = field.geo_origin
    bias_ang = rng.uniform(0.0, 2.0 * math.pi)
    de = perturb.geotag_bias * math.cos(bias_ang)
    dn = perturb.geotag_bias * math.sin(bias_ang)
    rad = math.pi / 180.0
    origin = (
        lat + dn / (_EARTH_RADIUS_M * rad),
        lon + de / (_EARTH_RADIUS_M * rad * math.cos(lat * rad)),
        alt,
    )
    ground = ColoredGeoCloud(ground_xyz, rgb, origin, heading=field.heading)
    return ground, truth
