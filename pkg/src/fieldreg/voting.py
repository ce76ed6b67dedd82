"""Dominant-flow selection by accumulator voting and 3D correspondence lifting.

Seed flows are quantized into 2D bins; the fullest bin (ties broken by
lower mean match cost) and optionally its 8 neighbors define the coherent
subset.  Winning seeds are then turned into point correspondences through
the per-cell anchor points of the two maps, with the ground-side cell
mapped back through the inverse of the initial-alignment warp so q lives
in the original ground-cloud frame.
"""

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientCorrespondencesError
from .flow import FlowField
from .geometry import Correspondence3D
from .gridmap import MultimodalGridMap


@dataclass(frozen=True)
class VoteParams:
    bin_step: float = 1.0
    include_neighbor_bins: bool = True

    def __post_init__(self):
        if self.bin_step <= 0:
            raise ValueError("bin_step must be positive")


def vote_flows(flows: FlowField, params: VoteParams = VoteParams()) -> FlowField:
    """Subset of seeds falling in the winning flow bin (and its ring).

    The winner is the bin with the most seeds; equal counts go to the bin
    with the lower mean match cost.
    """
    n = len(flows)
    if n == 0:
        raise ValueError("cannot vote on an empty flow field")

    bins = np.floor(flows.flow / params.bin_step).astype(np.int64)
    uniq, inverse, counts = np.unique(
        bins, axis=0, return_inverse=True, return_counts=True
    )
    cost_sums = np.bincount(inverse, weights=flows.cost, minlength=len(uniq))
    mean_costs = cost_sums / counts

    best = np.lexsort((mean_costs, -counts))[0]
    win = uniq[best]

    if params.include_neighbor_bins:
        near = np.max(np.abs(bins - win[None, :]), axis=1) <= 1
    else:
        near = inverse == best
    return flows.subset(near)


def lift_to_3d(
    winners: FlowField, A: MultimodalGridMap, G: MultimodalGridMap
) -> list[Correspondence3D]:
    """Anchor-point correspondences for the winning seeds.

    p is the anchor of the seed cell in the aerial map; q is the anchor of
    the matched cell in the original ground map, found by mapping the
    matched cell center back through the inverse of the warp transform the
    flow field was estimated under.  Seeds whose source or target cell has
    no anchor (or whose target leaves the ground map) are dropped.
    """
    if A.source is None or G.source is None:
        raise ValueError("both grid maps must retain their source clouds")
    inv = winners.init.inverse()
    h, w = winners.grid_shape
    out = []
    for i in range(len(winners)):
        sx, sy = int(winners.seed_xy[i, 0]), int(winners.seed_xy[i, 1])
        a_idx = A.anchor[sy, sx]
        if a_idx < 0:
            continue
        tx = sx + int(round(winners.flow[i, 0]))
        ty = sy + int(round(winners.flow[i, 1]))
        if not (0 <= tx < w and 0 <= ty < h):
            continue
        cx, cy = A.cell_center(tx, ty)
        gx, gy, _ = inv.apply(np.array([[float(cx), float(cy), 0.0]]))[0]
        gix, giy = G.cell_index(gx, gy)
        gh, gw = G.shape
        if not (0 <= gix < gw and 0 <= giy < gh):
            continue
        g_idx = G.anchor[giy, gix]
        if g_idx < 0:
            continue
        out.append(
            Correspondence3D(p=A.source.xyz[a_idx].copy(), q=G.source.xyz[g_idx].copy())
        )
    if len(out) < 4:
        raise InsufficientCorrespondencesError(
            f"only {len(out)} usable correspondences, need at least 4"
        )
    return out


def dump_correspondences(corr, path) -> None:
    """CSV rows px,py,pz,qx,qy,qz."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("px,py,pz,qx,qy,qz\n")
        for c in corr:
            vals = [*c.p, *c.q]
            fh.write(",".join(repr(float(v)) for v in vals) + "\n")
