"""Multimodal grid maps: vegetation-index and height rasters with anchors.

A cloud is projected onto a planar grid of square cells.  Every cell
stores a Gaussian-weighted average of the excess-green index and of the
height of nearby points, the accumulated weight, and the index of the
cell's anchor point: the nearest-to-center of the points lying inside
the cell's own square.  Averages draw on a 3-sigma neighborhood, so a
cell can be occupied yet anchor-less when all its weight spills in from
points stored by neighboring cells.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateBoundsError
from .geometry import ColoredGeoCloud

# accumulated Gaussian mass below this counts as an empty cell
WEIGHT_CUTOFF = 1e-8


def exg(rgb: np.ndarray) -> np.ndarray:
    """Excess-green index 2g - r - b per row of an (N, 3) color array.

    For colors in [0, 1] the result lies in [-2, 2]; green-dominant
    pixels score positive, soil hovers near zero.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    return 2.0 * rgb[..., 1] - rgb[..., 0] - rgb[..., 2]


@dataclass(frozen=True)
class GridMapParams:
    """Rasterization settings.

    cell_size: cell edge length in meters.
    sigma_avg: standard deviation (meters) of the circular Gaussian used
        to weight point contributions; points farther than 3*sigma_avg
        from a cell center contribute nothing to it.
    bounds: optional (xmin, ymin, xmax, ymax) rectangle in meters; grid
        extent is taken from the cloud when absent.
    """

    cell_size: float = 0.02
    sigma_avg: float = 0.04
    bounds: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        if not (self.cell_size > 0.0) or not (self.sigma_avg > 0.0):
            raise ValueError("cell_size and sigma_avg must be positive")


@dataclass(frozen=True)
class GridCell:
    """Read-only view of one cell."""

    exg: float
    height: float
    weight_sum: float
    anchor: int | None


@dataclass(frozen=True)
class MultimodalGridMap:
    """Raster of shape (h, w); arrays are indexed [iy, ix].

    ``anchor`` holds point indices into ``source`` with -1 for cells
    without an anchor.  ``source`` may be None for synthetic maps that
    never get lifted back to 3D.
    """

    exg: np.ndarray
    height: np.ndarray
    weight: np.ndarray
    anchor: np.ndarray
    cell_size: float
    origin: tuple[float, float]
    source: ColoredGeoCloud | None = None

    def __post_init__(self):
        if self.exg.ndim != 2:
            raise ValueError("channel arrays must be 2-D")
        for name in ("height", "weight", "anchor"):
            if getattr(self, name).shape != self.exg.shape:
                raise ValueError(f"channel {name} shape mismatch")
        if not (self.cell_size > 0.0):
            raise ValueError("cell_size must be positive")

    @property
    def shape(self) -> tuple[int, int]:
        return self.exg.shape

    @property
    def w(self) -> int:
        return self.exg.shape[1]

    @property
    def h(self) -> int:
        return self.exg.shape[0]

    def cell(self, ix: int, iy: int) -> GridCell:
        a = int(self.anchor[iy, ix])
        return GridCell(
            exg=float(self.exg[iy, ix]),
            height=float(self.height[iy, ix]),
            weight_sum=float(self.weight[iy, ix]),
            anchor=None if a < 0 else a,
        )

    def cell_center(self, ix, iy) -> tuple[np.ndarray, np.ndarray]:
        """World x, y of cell centers; accepts scalars or arrays."""
        cx = self.origin[0] + (np.asarray(ix) + 0.5) * self.cell_size
        cy = self.origin[1] + (np.asarray(iy) + 0.5) * self.cell_size
        return cx, cy

    def cell_index(self, x, y) -> tuple[np.ndarray, np.ndarray]:
        """Containing cell of world coordinates (may fall outside the grid)."""
        ix = np.floor((np.asarray(x) - self.origin[0]) / self.cell_size).astype(np.int64)
        iy = np.floor((np.asarray(y) - self.origin[1]) / self.cell_size).astype(np.int64)
        return ix, iy

    @property
    def occupied(self) -> np.ndarray:
        return self.weight >= WEIGHT_CUTOFF


def rasterize(cloud: ColoredGeoCloud, params: GridMapParams) -> MultimodalGridMap:
    """Project a cloud onto a multimodal grid map.

    Channel values are convex combinations of contributing point values:

        cell_v = sum_i w_i v_i / sum_i w_i,  w_i = exp(-d_i^2 / (2 sigma^2))

    over points within 3*sigma_avg (planar distance) of the cell center.
    Cells whose accumulated weight stays below ``WEIGHT_CUTOFF`` read as
    empty (both channels zero).  The anchor is the contributing point
    nearest the cell center among those inside the cell's own square;
    cells whose square holds no point store no anchor even when weight
    spills in from neighbors.
    """
    cs = params.cell_size
    sigma = params.sigma_avg
    xyz = cloud.xyz
    px, py, pz = xyz[:, 0], xyz[:, 1], xyz[:, 2]
    pe = exg(cloud.rgb)

    if params.bounds is not None:
        xmin, ymin, xmax, ymax = params.bounds
        if not (xmax > xmin and ymax > ymin):
            raise DegenerateBoundsError(
                f"bounds ({xmin}, {ymin}, {xmax}, {ymax}) enclose no area"
            )
    else:
        xmin, xmax = float(px.min()), float(px.max())
        ymin, ymax = float(py.min()), float(py.max())

    w = max(1, int(math.ceil((xmax - xmin) / cs - 1e-12)))
    h = max(1, int(math.ceil((ymax - ymin) / cs - 1e-12)))

    # containing cell per point; points on the max edge fold into the last cell
    ix_raw = np.floor((px - xmin) / cs).astype(np.int64)
    iy_raw = np.floor((py - ymin) / cs).astype(np.int64)
    on_edge_x = (px == xmax) & (ix_raw == w)
    on_edge_y = (py == ymax) & (iy_raw == h)
    ix_raw[on_edge_x] -= 1
    iy_raw[on_edge_y] -= 1

    r_cells = int(math.ceil(3.0 * sigma / cs))
    r2_max = (3.0 * sigma) ** 2
    inv_two_sigma2 = 1.0 / (2.0 * sigma * sigma)

    n_cells = w * h
    acc_w = np.zeros(n_cells)
    acc_wz = np.zeros(n_cells)
    acc_we = np.zeros(n_cells)

    ix0 = np.clip(ix_raw, -r_cells - 1, w + r_cells)  # keep offsets near the grid
    iy0 = np.clip(iy_raw, -r_cells - 1, h + r_cells)
    for dy in range(-r_cells, r_cells + 1):
        ty = iy0 + dy
        my = (ty >= 0) & (ty < h)
        for dx in range(-r_cells, r_cells + 1):
            tx = ix0 + dx
            m = my & (tx >= 0) & (tx < w)
            if not m.any():
                continue
            cx = xmin + (tx[m] + 0.5) * cs
            cy = ymin + (ty[m] + 0.5) * cs
            d2 = (px[m] - cx) ** 2 + (py[m] - cy) ** 2
            inside = d2 <= r2_max
            if not inside.any():
                continue
            flat = ty[m][inside] * w + tx[m][inside]
            wgt = np.exp(-d2[inside] * inv_two_sigma2)
            acc_w += np.bincount(flat, weights=wgt, minlength=n_cells)
            acc_wz += np.bincount(flat, weights=wgt * pz[m][inside], minlength=n_cells)
            acc_we += np.bincount(flat, weights=wgt * pe[m][inside], minlength=n_cells)

    occupied = acc_w >= WEIGHT_CUTOFF
    height = np.zeros(n_cells)
    exg_ch = np.zeros(n_cells)
    np.divide(acc_wz, acc_w, out=height, where=occupied)
    np.divide(acc_we, acc_w, out=exg_ch, where=occupied)

    # anchor: nearest-to-center of the points the cell's own square holds,
    # so the stored index always maps back to this cell
    anchor = np.full(n_cells, -1, dtype=np.int64)
    contained = (ix_raw >= 0) & (ix_raw < w) & (iy_raw >= 0) & (iy_raw < h)
    if contained.any():
        idx = np.nonzero(contained)[0]
        flat = iy_raw[idx] * w + ix_raw[idx]
        ccx = xmin + (ix_raw[idx] + 0.5) * cs
        ccy = ymin + (iy_raw[idx] + 0.5) * cs
        d2own = (px[idx] - ccx) ** 2 + (py[idx] - ccy) ** 2
        order = np.lexsort((idx, d2own, flat))
        flat_sorted = flat[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = flat_sorted[1:] != flat_sorted[:-1]
        anchor[flat_sorted[first]] = idx[order][first]

    return MultimodalGridMap(
        exg=exg_ch.reshape(h, w),
        height=height.reshape(h, w),
        weight=acc_w.reshape(h, w),
        anchor=anchor.reshape(h, w),
        cell_size=cs,
        origin=(xmin, ymin),
        source=cloud,
    )


def resample_grid(grid: MultimodalGridMap, transform, like: MultimodalGridMap) -> MultimodalGridMap:
    """Warp ``grid`` into the frame and geometry of ``like``.

    ``transform`` maps grid-frame coordinates into like-frame coordinates
    (the geotag initial guess).  Output channels are bilinear samples of
    the input channels at the inversely-mapped cell centers; regions
    that fall outside the input read as empty.  Heights are shifted by
    the transform's z-translation.  Anchors do not survive warping: map
    back through the transform's inverse to recover source points.
    """
    from scipy.ndimage import map_coordinates

    h, w = like.shape
    iyy, ixx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    cx, cy = like.cell_center(ixx, iyy)
    inv = transform.inverse()
    pts = np.stack([cx.ravel(), cy.ravel(), np.zeros(cx.size)], axis=1)
    back = inv.apply(pts)
    gx = (back[:, 0] - grid.origin[0]) / grid.cell_size - 0.5
    gy = (back[:, 1] - grid.origin[1]) / grid.cell_size - 0.5
    coords = np.stack([gy.reshape(h, w), gx.reshape(h, w)])

    warped_w = map_coordinates(grid.weight, coords, order=1, mode="constant", cval=0.0)
    warped_e = map_coordinates(grid.exg, coords, order=1, mode="constant", cval=0.0)
    warped_h = map_coordinates(grid.height, coords, order=1, mode="constant", cval=0.0)
    valid = warped_w >= WEIGHT_CUTOFF
    tz = float(transform.translation[2])
    warped_h = np.where(valid, warped_h + tz, 0.0)
    warped_e = np.where(valid, warped_e, 0.0)

    return MultimodalGridMap(
        exg=warped_e,
        height=warped_h,
        weight=warped_w,
        anchor=np.full((h, w), -1, dtype=np.int64),
        cell_size=like.cell_size,
        origin=like.origin,
        source=None,
    )


def dump_gridmap(grid: MultimodalGridMap, out_dir) -> None:
    """Write both channels as 16-bit grayscale PNGs plus a text manifest."""
    from PIL import Image

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ranges = {}
    for name, channel in (("exg", grid.exg), ("height", grid.height)):
        lo, hi = float(channel.min()), float(channel.max())
        span = hi - lo if hi > lo else 1.0
        scaled = ((channel - lo) / span * 65535.0).astype(np.uint16)
        Image.fromarray(scaled[::-1]).save(out / f"{name}.png")
        ranges[name] = (lo, hi)
    lines = [
        f"origin_x={grid.origin[0]!r}",
        f"origin_y={grid.origin[1]!r}",
        f"cell_size={grid.cell_size!r}",
        f"width={grid.w}",
        f"height={grid.h}",
    ]
    for name, (lo, hi) in ranges.items():
        lines.append(f"{name}_min={lo!r}")
        lines.append(f"{name}_max={hi!r}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
