"""Dense per-cell descriptors for the two grid-map channels.

Two families are computed, one per modality:

* an oriented-gradient descriptor on the excess-green channel: 8-bin
  gradient-orientation histograms, Gaussian-smoothed at ring-dependent
  scales, sampled at a center plus three rings of five points
  (16 histograms x 8 bins = 128 dimensions);
* a fast point-feature histogram on the height channel: pairwise
  surface-angle triplets against neighbors within a radius, binned into
  3 x 11 bins and re-accumulated with inverse-distance weights
  (33 dimensions).

Both are returned as dense float32 fields of shape (h, w, dim) so a
matcher can look up any cell.  Empty cells participate with their stored
zero values, which keeps the fields defined everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate, gaussian_filter

from .errors import DescriptorFootprintError
from .gridmap import MultimodalGridMap

DAISY_DIM = 128
FPFH_DIM = 33

_EPS_NORM = 1e-12


@dataclass(frozen=True)
class DaisyConfig:
    """Geometry of the oriented-gradient descriptor.

    Defaults give 1 + 3*5 = 16 histograms of 8 orientation bins.
    Ring radii and smoothing sigmas are in cells.
    """

    ring_radii: tuple[float, ...] = (5.0, 10.0, 15.0)
    points_per_ring: int = 5
    orientations: int = 8
    sigma_center: float = 2.5
    ring_sigmas: tuple[float, ...] = (2.5, 5.0, 7.5)

    def __post_init__(self):
        if len(self.ring_sigmas) != len(self.ring_radii):
            raise ValueError("need one smoothing sigma per ring")
        if self.points_per_ring < 1 or self.orientations < 1:
            raise ValueError("points_per_ring and orientations must be positive")

    @property
    def length(self) -> int:
        return (1 + len(self.ring_radii) * self.points_per_ring) * self.orientations

    @property
    def footprint(self) -> int:
        return 2 * int(math.ceil(max(self.ring_radii))) + 1


def _shift_int(a: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """out[y, x] = a[y + dy, x + dx], zero where that falls outside."""
    h, w = a.shape[:2]
    out = np.zeros_like(a)
    y0, y1 = max(0, -dy), min(h, h - dy)
    x0, x1 = max(0, -dx), min(w, w - dx)
    if y0 < y1 and x0 < x1:
        out[y0:y1, x0:x1] = a[y0 + dy : y1 + dy, x0 + dx : x1 + dx]
    return out


def _sample_shifted(a: np.ndarray, dy: float, dx: float) -> np.ndarray:
    """Bilinear sample of ``a`` at (y + dy, x + dx), zero outside."""
    iy, ix = math.floor(dy), math.floor(dx)
    fy, fx = dy - iy, dx - ix
    out = (1 - fy) * (1 - fx) * _shift_int(a, iy, ix)
    if fx > 0:
        out += (1 - fy) * fx * _shift_int(a, iy, ix + 1)
    if fy > 0:
        out += fy * (1 - fx) * _shift_int(a, iy + 1, ix)
    if fy > 0 and fx > 0:
        out += fy * fx * _shift_int(a, iy + 1, ix + 1)
    return out


def daisy_field(grid: MultimodalGridMap, config: DaisyConfig = DaisyConfig()) -> np.ndarray:
    """Oriented-gradient descriptors of the excess-green channel, all cells.

    Each of the 16 sample histograms is L2-normalized independently
    (all-zero histograms, e.g. over constant regions, stay zero), so a
    descriptor is invariant to a global rescaling of the channel's
    gradient magnitude but keeps its orientation structure.
    """
    h, w = grid.shape
    if min(h, w) < config.footprint:
        raise DescriptorFootprintError(
            f"map {w}x{h} smaller than descriptor footprint "
            f"{config.footprint}; pad the map or shrink the ring radii"
        )
    img = grid.exg.astype(np.float64)
    gy, gx = np.gradient(img)

    k = config.orientations
    oriented = []
    for o in range(k):
        theta = 2.0 * math.pi * o / k
        proj = math.cos(theta) * gx + math.sin(theta) * gy
        oriented.append(np.maximum(proj, 0.0))

    smoothed = {}
    sigmas = (config.sigma_center,) + tuple(config.ring_sigmas)
    for s in set(sigmas):
        smoothed[s] = [
            gaussian_filter(g, s, mode="constant", cval=0.0) for g in oriented
        ]

    blocks = [np.stack(smoothed[config.sigma_center], axis=-1)]
    for radius, sigma in zip(config.ring_radii, config.ring_sigmas):
        for j in range(config.points_per_ring):
            phi = 2.0 * math.pi * j / config.points_per_ring
            dx, dy = radius * math.cos(phi), radius * math.sin(phi)
            planes = [_sample_shifted(g, dy, dx) for g in smoothed[sigma]]
            blocks.append(np.stack(planes, axis=-1))

    out = np.empty((h, w, config.length), dtype=np.float32)
    for i, block in enumerate(blocks):
        norm = np.sqrt(np.sum(block * block, axis=-1, keepdims=True))
        scale = np.where(norm > _EPS_NORM, 1.0 / np.maximum(norm, _EPS_NORM), 0.0)
        out[:, :, i * k : (i + 1) * k] = (block * scale).astype(np.float32)
    return out


def _circular_offsets(radius_cells: int):
    offs = []
    for dy in range(-radius_cells, radius_cells + 1):
        for dx in range(-radius_cells, radius_cells + 1):
            if dx * dx + dy * dy <= radius_cells * radius_cells:
                offs.append((dy, dx))
    return offs


def estimate_normals(grid: MultimodalGridMap, radius_cells: int) -> np.ndarray:
    """Per-cell upward unit normals from a windowed plane fit of the heights.

    Fits z = a x + b y + c by least squares over the circular window,
    handling boundary truncation exactly, and returns
    (-a, -b, 1) normalized.  Flat fields give straight-up normals, and
    adding a constant to all heights leaves the result unchanged.
    """
    cs = grid.cell_size
    z = grid.height.astype(np.float64)
    size = 2 * radius_cells + 1
    kn = np.zeros((size, size))
    kx = np.zeros((size, size))
    ky = np.zeros((size, size))
    kxx = np.zeros((size, size))
    kyy = np.zeros((size, size))
    kxy = np.zeros((size, size))
    for dy, dx in _circular_offsets(radius_cells):
        r, c = dy + radius_cells, dx + radius_cells
        kn[r, c] = 1.0
        kx[r, c] = dx * cs
        ky[r, c] = dy * cs
        kxx[r, c] = (dx * cs) ** 2
        kyy[r, c] = (dy * cs) ** 2
        kxy[r, c] = dx * dy * cs * cs

    ones = np.ones_like(z)
    opts = dict(mode="constant", cval=0.0)
    n = correlate(ones, kn, **opts)
    sx = correlate(ones, kx, **opts)
    sy = correlate(ones, ky, **opts)
    sxx = correlate(ones, kxx, **opts)
    syy = correlate(ones, kyy, **opts)
    sxy = correlate(ones, kxy, **opts)
    sz = correlate(z, kn, **opts)
    szx = correlate(z, kx, **opts)
    szy = correlate(z, ky, **opts)

    n = np.maximum(n, 1.0)
    a00 = sxx - sx * sx / n
    a01 = sxy - sx * sy / n
    a11 = syy - sy * sy / n
    r0 = szx - sx * sz / n
    r1 = szy - sy * sz / n
    det = a00 * a11 - a01 * a01
    safe = np.abs(det) > 1e-18
    inv_det = np.where(safe, 1.0 / np.where(safe, det, 1.0), 0.0)
    a = (a11 * r0 - a01 * r1) * inv_det
    b = (a00 * r1 - a01 * r0) * inv_det

    normals = np.stack([-a, -b, np.ones_like(a)], axis=-1)
    normals /= np.linalg.norm(normals, axis=-1, keepdims=True)
    return normals


def fpfh_field(grid: MultimodalGridMap, radius_cells: int = 4) -> np.ndarray:
    """Fast point-feature histograms of the height channel, all cells.

    Stage one bins the three pairwise surface angles (alpha, phi, theta)
    of every cell against its in-radius neighbors into 11 bins each and
    normalizes every group to percentages.  Stage two adds neighbor
    histograms weighted by inverse 3D distance and renormalizes, so each
    of the three 11-bin groups of the result sums to 100 (or stays zero
    where a cell has no neighbors).  Constant height offsets cancel in
    both the plane fit and the pair geometry.
    """
    if radius_cells < 2:
        raise ValueError(f"radius_cells must be at least 2, got {radius_cells}")
    h, w = grid.shape
    cs = grid.cell_size
    z = grid.height.astype(np.float64)
    normals = estimate_normals(grid, radius_cells)
    offsets = [o for o in _circular_offsets(radius_cells) if o != (0, 0)]

    n_cells = h * w
    spfh = np.zeros((n_cells, 3, 11))
    flat_all = np.arange(n_cells)

    inbounds = {}
    for dy, dx in offsets:
        inbounds[(dy, dx)] = _shift_int(np.ones((h, w)), dy, dx) > 0.5

    for dy, dx in offsets:
        valid = inbounds[(dy, dx)]
        zj = _shift_int(z, dy, dx)
        nj = np.stack(
            [_shift_int(normals[:, :, c], dy, dx) for c in range(3)], axis=-1
        )
        d = np.empty((h, w, 3))
        d[:, :, 0] = dx * cs
        d[:, :, 1] = dy * cs
        d[:, :, 2] = zj - z
        dist = np.linalg.norm(d, axis=-1)
        dhat = d / dist[:, :, None]

        dot_i = np.sum(normals * dhat, axis=-1)
        dot_j = np.sum(nj * dhat, axis=-1)
        i_is_source = np.abs(dot_i) >= np.abs(dot_j)
        u = np.where(i_is_source[:, :, None], normals, nj)
        nt = np.where(i_is_source[:, :, None], nj, normals)
        de = np.where(i_is_source[:, :, None], dhat, -dhat)

        phi = np.sum(u * de, axis=-1)
        v = np.cross(de, u)
        vn = np.linalg.norm(v, axis=-1)
        ok = valid & (vn > 1e-8)
        vhat = v / np.maximum(vn, 1e-30)[:, :, None]
        wvec = np.cross(u, vhat)
        alpha = np.sum(vhat * nt, axis=-1)
        theta = np.arctan2(np.sum(wvec * nt, axis=-1), np.sum(u * nt, axis=-1))

        ba = np.clip(((alpha + 1.0) * (11 / 2.0)).astype(np.int64), 0, 10)
        bp = np.clip(((phi + 1.0) * (11 / 2.0)).astype(np.int64), 0, 10)
        bt = np.clip(
            ((theta + math.pi) * (11 / (2.0 * math.pi))).astype(np.int64), 0, 10
        )
        okf = ok.ravel()
        cells = flat_all[okf]
        for feat, bins in enumerate((ba, bp, bt)):
            flat_bins = cells * 11 + bins.ravel()[okf]
            counts = np.bincount(flat_bins, minlength=n_cells * 11)
            spfh[:, feat, :] += counts.reshape(n_cells, 11)

    _normalize_groups(spfh)

    # stage two: inverse-distance weighted pooling of neighbor histograms
    spfh_img = spfh.reshape(h, w, 33)
    pooled = np.zeros_like(spfh_img)
    counts = np.zeros((h, w))
    for dy, dx in offsets:
        valid = inbounds[(dy, dx)]
        zj = _shift_int(z, dy, dx)
        dist = np.sqrt((dx * cs) ** 2 + (dy * cs) ** 2 + (zj - z) ** 2)
        wgt = np.where(valid, 1.0 / np.maximum(dist, 1e-12), 0.0)
        shifted = np.stack(
            [_shift_int(spfh_img[:, :, c], dy, dx) for c in range(33)], axis=-1
        )
        pooled += wgt[:, :, None] * shifted
        counts += valid

    counts = np.maximum(counts, 1.0)
    fpfh = spfh_img + pooled / counts[:, :, None]
    fpfh = fpfh.reshape(n_cells, 3, 11)
    _normalize_groups(fpfh)
    return fpfh.reshape(h, w, 33).astype(np.float32)


def _normalize_groups(hists: np.ndarray) -> None:
    """Scale each 11-bin group to sum 100 in place; zero groups stay zero."""
    sums = hists.sum(axis=-1, keepdims=True)
    np.multiply(
        hists, np.where(sums > _EPS_NORM, 100.0 / np.maximum(sums, _EPS_NORM), 0.0),
        out=hists,
    )
