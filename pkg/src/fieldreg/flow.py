"""Coarse-to-fine seed flow estimation between two multimodal grid maps.

A regular lattice of seeds is placed over the aerial map and each seed
searches for the integer cell offset into the (initial-guess-warped)
ground map that minimizes a weighted L1 distance over the stacked
appearance and geometry descriptors.  The search runs over an image
pyramid: random initialization at the coarsest level, then per level an
alternation of sequential raster propagation (each seed may adopt a
lattice neighbor's flow) and per-seed exponentially shrinking random
search, with flows upscaled between levels.  A forward-backward
consistency pass discards incoherent seeds.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .descriptors import DaisyConfig, daisy_field, fpfh_field
from .errors import InsufficientOverlapError
from .geometry import AnisoAffine
from .gridmap import WEIGHT_CUTOFF, MultimodalGridMap, resample_grid

INVALID_COST = np.inf


@dataclass(frozen=True)
class FlowParams:
    """Knobs for the seed flow search.

    alpha and beta weight the appearance and geometry descriptor terms
    of the match cost.  random_search_radius_init bounds both the random
    initialization at the coarsest level and the first radius of each
    per-seed random search, in cells of the level being processed.
    """

    alpha: float = 1.0
    beta: float = 0.5
    seed_spacing: int = 3
    pyramid_levels: int = 3
    scale_factor: float = 0.5
    iterations_per_level: int = 6
    random_search_radius_init: int = 16
    forward_backward_tol: float = 1.0
    daisy: DaisyConfig = field(default_factory=DaisyConfig)
    fpfh_radius_cells: int = 4

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.alpha + self.beta <= 0:
            raise ValueError("descriptor weights must be non-negative and not both zero")
        if self.seed_spacing < 1:
            raise ValueError("seed_spacing must be at least 1 cell")
        if self.pyramid_levels < 1:
            raise ValueError("pyramid_levels must be at least 1")
        if not 0.0 < self.scale_factor < 1.0:
            raise ValueError("scale_factor must lie in (0, 1)")
        if self.scale_factor != 0.5:
            # only the halving pyramid is implemented; other ratios would
            # need a generic area resampler
            raise ValueError("only scale_factor = 0.5 is supported")
        if self.iterations_per_level < 1:
            raise ValueError("iterations_per_level must be at least 1")
        if self.random_search_radius_init < 1:
            raise ValueError("random_search_radius_init must be at least 1 cell")


@dataclass(frozen=True)
class DescriptorStack:
    """Dense per-cell descriptors of one grid map plus its occupancy."""

    daisy: np.ndarray
    fpfh: np.ndarray
    occupied: np.ndarray

    @property
    def shape(self):
        return self.occupied.shape


@dataclass(frozen=True)
class FlowField:
    """Surviving seed matches between an aerial map and a warped ground map.

    seed_xy holds (x, y) cell indices into the aerial map, flow holds the
    matched (dx, dy) offsets in cells, cost the match cost per seed.
    init is the transform that was used to warp the ground map into the
    aerial frame before matching; downstream correspondence lifting maps
    matched cells back through its inverse.
    """

    seed_xy: np.ndarray
    flow: np.ndarray
    cost: np.ndarray
    seed_spacing: int
    grid_shape: tuple
    init: AnisoAffine

    def __post_init__(self):
        seed_xy = np.ascontiguousarray(np.asarray(self.seed_xy, dtype=np.int64))
        flow = np.ascontiguousarray(np.asarray(self.flow, dtype=np.float64))
        cost = np.ascontiguousarray(np.asarray(self.cost, dtype=np.float64))
        n = seed_xy.shape[0]
        if seed_xy.shape != (n, 2) or flow.shape != (n, 2) or cost.shape != (n,):
            raise ValueError("seed_xy, flow and cost shapes are inconsistent")
        h, w = self.grid_shape
        if n:
            if seed_xy[:, 0].min() < 0 or seed_xy[:, 0].max() >= w:
                raise ValueError("seed x positions fall outside the grid")
            if seed_xy[:, 1].min() < 0 or seed_xy[:, 1].max() >= h:
                raise ValueError("seed y positions fall outside the grid")
            if not np.all(np.isfinite(flow)):
                raise ValueError("flow vectors must be finite")
        for name, arr in (("seed_xy", seed_xy), ("flow", flow), ("cost", cost)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self):
        return self.seed_xy.shape[0]

    def subset(self, mask_or_index) -> "FlowField":
        return FlowField(
            seed_xy=self.seed_xy[mask_or_index],
            flow=self.flow[mask_or_index],
            cost=self.cost[mask_or_index],
            seed_spacing=self.seed_spacing,
            grid_shape=self.grid_shape,
            init=self.init,
        )


def compute_descriptors(grid: MultimodalGridMap, params: FlowParams) -> DescriptorStack:
    """Appearance and geometry descriptor fields for every cell of a map."""
    return DescriptorStack(
        daisy=daisy_field(grid, params.daisy),
        fpfh=fpfh_field(grid, params.fpfh_radius_cells),
        occupied=grid.occupied,
    )


def match_cost(
    a_desc: DescriptorStack,
    g_desc: DescriptorStack,
    seed_pos,
    flow,
    alpha: float = 1.0,
    beta: float = 0.5,
) -> float:
    """Weighted L1 descriptor distance for one seed/flow pair.

    seed_pos and flow are (x, y) pairs in cells.  A target outside the
    ground map or on an empty cell costs +inf and can never win.
    """
    sx, sy = int(seed_pos[0]), int(seed_pos[1])
    tx, ty = sx + int(round(flow[0])), sy + int(round(flow[1]))
    h, w = g_desc.shape
    if not (0 <= tx < w and 0 <= ty < h):
        return INVALID_COST
    if not g_desc.occupied[ty, tx]:
        return INVALID_COST
    a = alpha * np.abs(
        a_desc.daisy[sy, sx].astype(np.float64) - g_desc.daisy[ty, tx].astype(np.float64)
    ).sum()
    b = beta * np.abs(
        a_desc.fpfh[sy, sx].astype(np.float64) - g_desc.fpfh[ty, tx].astype(np.float64)
    ).sum()
    return float(a + b)


def _halve(grid: MultimodalGridMap) -> MultimodalGridMap:
    """Weight-aware 2x2 box downsample; doubled cell size, same origin."""
    h, w = grid.shape
    h2, w2 = (h + 1) // 2, (w + 1) // 2
    wgt = np.zeros((h2 * 2, w2 * 2))
    wz = np.zeros_like(wgt)
    we = np.zeros_like(wgt)
    wgt[:h, :w] = grid.weight
    wz[:h, :w] = grid.weight * grid.height
    we[:h, :w] = grid.weight * grid.exg

    def pool(img):
        return img.reshape(h2, 2, w2, 2).sum(axis=(1, 3))

    wsum = pool(wgt)
    occ = wsum > WEIGHT_CUTOFF
    inv = np.where(occ, 1.0 / np.maximum(wsum, WEIGHT_CUTOFF), 0.0)
    return MultimodalGridMap(
        exg=pool(we) * inv,
        height=pool(wz) * inv,
        weight=wsum / 4.0,
        anchor=np.full((h2, w2), -1, dtype=np.int64),
        cell_size=grid.cell_size * 2.0,
        origin=grid.origin,
        source=None,
    )


@njit(cache=True)
def _cost_at(desc_a, desc_g, occ_g, sy, sx, ty, tx):
    h, w, d = desc_g.shape
    if ty < 0 or ty >= h or tx < 0 or tx >= w:
        return np.inf
    if occ_g[ty, tx] == 0:
        return np.inf
    acc = 0.0
    for k in range(d):
        acc += abs(desc_a[sy, sx, k] - desc_g[ty, tx, k])
    return acc


@njit(cache=True)
def _eval_all(desc_a, desc_g, occ_g, pos, flw, cost, active):
    for i in range(pos.shape[0]):
        if active[i] == 0:
            cost[i] = np.inf
            continue
        cost[i] = _cost_at(
            desc_a, desc_g, occ_g, pos[i, 0], pos[i, 1],
            pos[i, 0] + flw[i, 0], pos[i, 1] + flw[i, 1],
        )


@njit(cache=True)
def _propagate(desc_a, desc_g, occ_g, pos, flw, cost, active, nr, nc, reverse):
    # sequential pass over the seed lattice; each seed may adopt the flow
    # of the lattice neighbors already visited in this pass
    total = nr * nc
    for step in range(total):
        lin = total - 1 - step if reverse else step
        r = lin // nc
        c = lin - r * nc
        if active[lin] == 0:
            continue
        d = 1 if reverse else -1
        for k in range(2):
            rr = r + d if k == 0 else r
            cc = c if k == 0 else c + d
            if rr < 0 or rr >= nr or cc < 0 or cc >= nc:
                continue
            j = rr * nc + cc
            fy = flw[j, 0]
            fx = flw[j, 1]
            if fy == flw[lin, 0] and fx == flw[lin, 1]:
                continue
            cand = _cost_at(
                desc_a, desc_g, occ_g, pos[lin, 0], pos[lin, 1],
                pos[lin, 0] + fy, pos[lin, 1] + fx,
            )
            if cand < cost[lin]:
                cost[lin] = cand
                flw[lin, 0] = fy
                flw[lin, 1] = fx


@njit(cache=True)
def _random_search(desc_a, desc_g, occ_g, pos, flw, cost, active, radii, uni):
    # per-seed exponentially shrinking search around the current best
    for i in range(pos.shape[0]):
        if active[i] == 0:
            continue
        for k in range(radii.shape[0]):
            r = radii[k]
            dy = int(round(uni[i, k, 0] * r))
            dx = int(round(uni[i, k, 1] * r))
            if dy == 0 and dx == 0:
                continue
            cand = _cost_at(
                desc_a, desc_g, occ_g, pos[i, 0], pos[i, 1],
                pos[i, 0] + flw[i, 0] + dy, pos[i, 1] + flw[i, 1] + dx,
            )
            if cand < cost[i]:
                cost[i] = cand
                flw[i, 0] += dy
                flw[i, 1] += dx


def _radius_schedule(start: int):
    radii = []
    r = float(start)
    while r >= 1.0:
        radii.append(int(round(r)))
        r /= 2.0
    return np.asarray(radii, dtype=np.int64)


def _pyramid(grid: MultimodalGridMap, levels: int):
    maps = [grid]
    for _ in range(levels - 1):
        maps.append(_halve(maps[-1]))
    return maps


def _combined_descriptors(grid: MultimodalGridMap, params: FlowParams):
    stack = compute_descriptors(grid, params)
    comb = np.concatenate(
        [
            (params.alpha * stack.daisy.astype(np.float64)).astype(np.float32),
            (params.beta * stack.fpfh.astype(np.float64)).astype(np.float32),
        ],
        axis=2,
    )
    return np.ascontiguousarray(comb), np.ascontiguousarray(
        stack.occupied.astype(np.uint8)
    )


def _seed_lattice(shape, spacing):
    h, w = shape
    ys = np.arange(spacing // 2, h, spacing, dtype=np.int64)
    xs = np.arange(spacing // 2, w, spacing, dtype=np.int64)
    return ys, xs


def _run_pyramid(desc_a, occ_a_levels, desc_g, occ_g_levels, ys, xs, params, rng, trace):
    """One directional flow solve.  Returns finest-level flows and costs."""
    levels = len(desc_a)
    nr, nc = len(ys), len(xs)
    n = nr * nc
    pos0 = np.stack(
        [np.repeat(ys, nc), np.tile(xs, nr)], axis=1
    )  # (n,2) as (y, x), finest level

    flw = None
    cost = np.full(n, np.inf)
    for li in range(levels - 1, -1, -1):
        factor = 2**li
        pos = pos0 // factor
        h_l, w_l = occ_a_levels[li].shape
        np.clip(pos[:, 0], 0, h_l - 1, out=pos[:, 0])
        np.clip(pos[:, 1], 0, w_l - 1, out=pos[:, 1])
        pos = np.ascontiguousarray(pos)
        active = np.ascontiguousarray(
            occ_a_levels[li][pos[:, 0], pos[:, 1]].astype(np.uint8)
        )

        if flw is None:
            r0 = params.random_search_radius_init
            flw = np.zeros((n, 2), dtype=np.int64)
            _eval_all(desc_a[li], desc_g[li], occ_g_levels[li], pos, flw, cost, active)
            # random init within the search radius, zero flow kept if better
            uni0 = rng.random((n, 1, 2)) * 2.0 - 1.0
            _random_search(
                desc_a[li], desc_g[li], occ_g_levels[li], pos, flw, cost, active,
                np.asarray([r0], dtype=np.int64), uni0,
            )
            radii = _radius_schedule(r0)
        else:
            flw = flw * 2
            _eval_all(desc_a[li], desc_g[li], occ_g_levels[li], pos, flw, cost, active)
            radii = _radius_schedule(max(2, params.random_search_radius_init // 4))

        for it in range(params.iterations_per_level):
            _propagate(
                desc_a[li], desc_g[li], occ_g_levels[li], pos, flw, cost, active,
                nr, nc, it % 2 == 1,
            )
            if trace is not None:
                trace("propagate", li, it, cost.copy())
            uni = rng.random((n, len(radii), 2)) * 2.0 - 1.0
            _random_search(
                desc_a[li], desc_g[li], occ_g_levels[li], pos, flw, cost, active, radii, uni
            )
            if trace is not None:
                trace("search", li, it, cost.copy())

    return pos0, flw, cost, active


def estimate_flow(
    A: MultimodalGridMap,
    G: MultimodalGridMap,
    init: AnisoAffine,
    params: FlowParams = FlowParams(),
    rng: np.random.Generator | None = None,
    trace=None,
) -> FlowField:
    """Seed flows from the aerial map into the initial-guess-aligned ground map.

    The ground map is first resampled into A's frame through init, so the
    remaining motion is (mostly) a translation that the per-seed search can
    recover.  Seeds whose forward and backward flows disagree by more than
    params.forward_backward_tol cells are discarded, as are seeds on empty
    aerial cells and seeds whose best target is empty or out of bounds.

    trace, when given, is called as trace(phase, level, iteration, costs)
    after every propagation and random-search pass of the forward solve.
    """
    if abs(A.cell_size - G.cell_size) > 1e-12:
        raise ValueError("grid maps must share one cell size")
    if rng is None:
        rng = np.random.default_rng(0)

    same_frame = (
        init.is_identity
        and A.shape == G.shape
        and np.allclose(A.origin, G.origin, atol=1e-12)
    )
    Gw = G if same_frame else resample_grid(G, init, like=A)

    if not np.any(A.occupied & Gw.occupied):
        raise InsufficientOverlapError(
            "aerial and ground maps share no occupied cells after initial alignment"
        )

    maps_a = _pyramid(A, params.pyramid_levels)
    maps_g = _pyramid(Gw, params.pyramid_levels)
    desc_a, occ_a = [], []
    desc_g, occ_g = [], []
    for ma, mg in zip(maps_a, maps_g):
        da, oa = _combined_descriptors(ma, params)
        dg, og = _combined_descriptors(mg, params)
        desc_a.append(da)
        occ_a.append(oa)
        desc_g.append(dg)
        occ_g.append(og)

    ys, xs = _seed_lattice(A.shape, params.seed_spacing)
    if len(ys) == 0 or len(xs) == 0:
        raise InsufficientOverlapError("grid too small for one seed cell")

    pos_f, flow_f, cost_f, act_f = _run_pyramid(
        desc_a, occ_a, desc_g, occ_g, ys, xs, params, rng, trace
    )
    pos_b, flow_b, cost_b, act_b = _run_pyramid(
        desc_g, occ_g, desc_a, occ_a, ys, xs, params, rng, None
    )

    # forward-backward check: the reverse flow at the matched cell must
    # (approximately) cancel the forward flow
    nr, nc = len(ys), len(xs)
    spacing = params.seed_spacing
    start_y, start_x = ys[0], xs[0]
    keep = np.zeros(pos_f.shape[0], dtype=bool)
    tol = params.forward_backward_tol
    for i in range(pos_f.shape[0]):
        if not act_f[i] or not math.isfinite(cost_f[i]):
            continue
        ty = pos_f[i, 0] + flow_f[i, 0]
        tx = pos_f[i, 1] + flow_f[i, 1]
        r = int(round((ty - start_y) / spacing))
        c = int(round((tx - start_x) / spacing))
        if not (0 <= r < nr and 0 <= c < nc):
            continue
        j = r * nc + c
        if not act_b[j] or not math.isfinite(cost_b[j]):
            continue
        if (
            abs(flow_f[i, 0] + flow_b[j, 0]) <= tol
            and abs(flow_f[i, 1] + flow_b[j, 1]) <= tol
        ):
            keep[i] = True

    if not np.any(keep):
        raise InsufficientOverlapError("no seed survived the forward-backward check")

    # public order is (x, y)
    return FlowField(
        seed_xy=pos_f[keep][:, ::-1],
        flow=flow_f[keep][:, ::-1].astype(np.float64),
        cost=cost_f[keep],
        seed_spacing=params.seed_spacing,
        grid_shape=A.shape,
        init=init,
    )


def dump_flow(field: FlowField, csv_path, png_path=None) -> None:
    """Write seeds as CSV rows seed_x,seed_y,flow_x,flow_y,cost.

    With png_path, also render the seed lattice with hue = flow direction
    and brightness = relative flow magnitude.
    """
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("seed_x,seed_y,flow_x,flow_y,cost\n")
        for i in range(len(field)):
            fh.write(
                f"{field.seed_xy[i, 0]},{field.seed_xy[i, 1]},"
                f"{repr(float(field.flow[i, 0]))},{repr(float(field.flow[i, 1]))},"
                f"{repr(float(field.cost[i]))}\n"
            )
    if png_path is None:
        return

    import colorsys

    from PIL import Image

    h, w = field.grid_shape
    s = field.seed_spacing
    img = np.zeros(((h + s - 1) // s, (w + s - 1) // s, 3), dtype=np.uint8)
    mags = np.hypot(field.flow[:, 0], field.flow[:, 1])
    mmax = mags.max() if len(mags) and mags.max() > 0 else 1.0
    for i in range(len(field)):
        r = int(field.seed_xy[i, 1]) // s
        c = int(field.seed_xy[i, 0]) // s
        ang = math.atan2(field.flow[i, 1], field.flow[i, 0])
        hue = (ang + math.pi) / (2 * math.pi)
        val = 0.25 + 0.75 * (mags[i] / mmax)
        rgb = colorsys.hsv_to_rgb(hue, 1.0, val)
        img[r, c] = [int(255 * v) for v in rgb]
    Image.fromarray(img, mode="RGB").save(png_path)
