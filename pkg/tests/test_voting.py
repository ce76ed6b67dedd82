"""Flow voting and correspondence lifting against brute-force oracles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fieldreg.errors import InsufficientCorrespondencesError
from fieldreg.flow import FlowField
from fieldreg.geometry import AnisoAffine, ColoredGeoCloud
from fieldreg.gridmap import GridMapParams, rasterize
from fieldreg.voting import VoteParams, dump_correspondences, lift_to_3d, vote_flows

IDENT = AnisoAffine.identity()


def make_field(flows, costs=None, shape=(100, 100), init=IDENT):
    flows = np.asarray(flows, dtype=np.float64)
    n = len(flows)
    if costs is None:
        costs = np.zeros(n)
    side = int(np.ceil(np.sqrt(n)))
    seeds = np.stack(
        [3 * (np.arange(n) % side) + 1, 3 * (np.arange(n) // side) + 1], axis=1
    )
    return FlowField(
        seed_xy=seeds,
        flow=flows,
        cost=np.asarray(costs, dtype=np.float64),
        seed_spacing=3,
        grid_shape=shape,
        init=init,
    )


def brute_force_vote(field, params):
    """Reference implementation: exhaustive bin scan."""
    bins = [
        (int(np.floor(fx / params.bin_step)), int(np.floor(fy / params.bin_step)))
        for fx, fy in field.flow
    ]
    stats = {}
    for i, b in enumerate(bins):
        stats.setdefault(b, []).append(i)
    best = None
    for b, idx in sorted(stats.items()):
        count = len(idx)
        mean_cost = float(np.mean(field.cost[idx]))
        key = (-count, mean_cost)
        if best is None or key < best[0]:
            best = (key, b)
    win = best[1]
    keep = []
    for i, b in enumerate(bins):
        d = max(abs(b[0] - win[0]), abs(b[1] - win[1]))
        if (params.include_neighbor_bins and d <= 1) or b == win:
            keep.append(i)
    return set(keep), win


class TestVoteFlows:
    def test_cluster_beats_scattered_outliers(self):
        rng = np.random.default_rng(0)
        flows = [(10.0, 0.0)] * 80
        # outliers spread far away, no two near the winner's neighbor ring
        flows += [(float(30 + 7 * i), float(-40 - 5 * i)) for i in range(20)]
        field = make_field(flows, rng.uniform(1, 2, 100))
        out = vote_flows(field, VoteParams())
        assert len(out) == 80
        assert np.all(out.flow == [10.0, 0.0])

    def test_all_identical_returns_everything(self):
        field = make_field([(3.0, -2.0)] * 25)
        out = vote_flows(field, VoteParams())
        assert len(out) == 25

    def test_tie_broken_by_lower_mean_cost(self):
        flows = [(0.0, 0.0)] * 10 + [(20.0, 20.0)] * 10
        costs = [5.0] * 10 + [3.0] * 10
        out = vote_flows(make_field(flows, costs), VoteParams())
        assert len(out) == 10
        assert np.all(out.flow == [20.0, 20.0])

    def test_neighbor_bins_recover_straddling_cluster(self):
        # a coherent cluster split across a bin edge
        flows = [(9.6, 0.0)] * 30 + [(10.4, 0.0)] * 28 + [(-50.0, 3.0)] * 20
        strict = vote_flows(make_field(flows), VoteParams(include_neighbor_bins=False))
        wide = vote_flows(make_field(flows), VoteParams(include_neighbor_bins=True))
        assert len(strict) == 30
        assert len(wide) == 58

    def test_empty_field_rejected(self):
        field = make_field(np.zeros((0, 2)))
        with pytest.raises(ValueError):
            vote_flows(field, VoteParams())

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000), st.booleans())
    def test_matches_brute_force_oracle(self, seed, neighbors):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 120))
        flows = rng.integers(-12, 13, (n, 2)).astype(float)
        costs = rng.uniform(0, 5, n)
        params = VoteParams(bin_step=float(rng.choice([0.5, 1.0, 2.0])),
                            include_neighbor_bins=neighbors)
        field = make_field(flows, costs)
        out = vote_flows(field, params)
        want, _ = brute_force_vote(field, params)
        got = {
            int(np.nonzero((field.seed_xy == s).all(axis=1))[0][0])
            for s in out.seed_xy
        }
        assert got == want


def lattice_cloud(n_side, cell, jitter, rng, transform=None):
    """One plant per grid cell, slightly off the cell centers."""
    xs, ys = np.meshgrid(np.arange(n_side), np.arange(n_side))
    pts = np.stack(
        [
            (xs.ravel() + 0.5) * cell + rng.uniform(-jitter, jitter, n_side**2),
            (ys.ravel() + 0.5) * cell + rng.uniform(-jitter, jitter, n_side**2),
            rng.uniform(0, 0.1, n_side**2),
        ],
        axis=1,
    )
    if transform is not None:
        pts = transform.apply(pts)
    rgb = np.full((len(pts), 3), 0.4)
    rgb[:, 1] = 0.8
    return ColoredGeoCloud(pts, rgb, (47.0, 8.0, 400.0))


class TestLiftTo3d:
    def test_identity_alignment_pairs_same_plants(self):
        rng = np.random.default_rng(1)
        cell = 0.1
        cloud = lattice_cloud(20, cell, 0.02, rng)
        grid = rasterize(cloud, GridMapParams(cell_size=cell, bounds=(0, 0, 2.0, 2.0)))
        n = 25
        field = FlowField(
            seed_xy=np.stack(
                [np.tile(np.arange(5, 15, 2), 5), np.repeat(np.arange(5, 15, 2), 5)],
                axis=1,
            ),
            flow=np.zeros((n, 2)),
            cost=np.zeros(n),
            seed_spacing=2,
            grid_shape=grid.shape,
            init=IDENT,
        )
        corr = lift_to_3d(field, grid, grid)
        assert len(corr) == n
        for c in corr:
            np.testing.assert_array_equal(c.p, c.q)

    def test_init_translation_maps_back_to_same_plants(self):
        # ground cloud is the aerial one moved by the inverse initial
        # guess, a whole number of cells; zero flow must pair each plant
        # with its own moved copy exactly
        rng = np.random.default_rng(2)
        cell = 0.1
        init = AnisoAffine.rigid_z(0.0, np.array([0.8, -0.5, 0.2]))
        aerial = lattice_cloud(20, cell, 0.02, rng)
        ground = aerial.with_xyz(init.inverse().apply(aerial.xyz))
        ga = rasterize(aerial, GridMapParams(cell_size=cell, bounds=(0, 0, 2.0, 2.0)))
        gg = rasterize(ground, GridMapParams(cell_size=cell))
        n = 16
        field = FlowField(
            seed_xy=np.stack(
                [np.tile(np.arange(6, 14, 2), 4), np.repeat(np.arange(6, 14, 2), 4)],
                axis=1,
            ),
            flow=np.zeros((n, 2)),
            cost=np.zeros(n),
            seed_spacing=2,
            grid_shape=ga.shape,
            init=init,
        )
        corr = lift_to_3d(field, ga, gg)
        assert len(corr) == n
        for c in corr:
            np.testing.assert_allclose(init.apply(c.q[None, :])[0], c.p, atol=1e-9)

    def test_init_rotation_pairs_within_cell_resolution(self):
        rng = np.random.default_rng(6)
        cell = 0.1
        init = AnisoAffine.rigid_z(0.25, np.array([0.4, -0.3, 0.1]))
        aerial = lattice_cloud(20, cell, 0.02, rng)
        ground = aerial.with_xyz(init.inverse().apply(aerial.xyz))
        ga = rasterize(aerial, GridMapParams(cell_size=cell, bounds=(0, 0, 2.0, 2.0)))
        gg = rasterize(ground, GridMapParams(cell_size=cell))
        n = 16
        field = FlowField(
            seed_xy=np.stack(
                [np.tile(np.arange(6, 14, 2), 4), np.repeat(np.arange(6, 14, 2), 4)],
                axis=1,
            ),
            flow=np.zeros((n, 2)),
            cost=np.zeros(n),
            seed_spacing=2,
            grid_shape=ga.shape,
            init=init,
        )
        corr = lift_to_3d(field, ga, gg)
        assert len(corr) >= n // 2
        # anchor pairing is at cell granularity: a plant and the anchor of
        # the cell its image lands in differ by at most a cell diagonal
        # plus the jitter reach on each side
        bound = cell * np.sqrt(2) + 2 * 0.02 + 1e-9
        for c in corr:
            err = np.linalg.norm(init.apply(c.q[None, :])[0][:2] - c.p[:2])
            assert err <= bound

    def test_empty_target_cells_dropped(self):
        rng = np.random.default_rng(3)
        cell = 0.1
        cloud = lattice_cloud(20, cell, 0.02, rng)
        grid = rasterize(cloud, GridMapParams(cell_size=cell, bounds=(0, 0, 2.0, 2.0)))
        flows = np.zeros((6, 2))
        flows[0] = (500.0, 0.0)  # off the map entirely
        field = FlowField(
            seed_xy=np.array([[5, 5], [7, 5], [9, 5], [11, 5], [13, 5], [15, 5]]),
            flow=flows,
            cost=np.zeros(6),
            seed_spacing=2,
            grid_shape=grid.shape,
            init=IDENT,
        )
        corr = lift_to_3d(field, grid, grid)
        assert len(corr) == 5

    def test_too_few_correspondences_raise(self):
        rng = np.random.default_rng(4)
        cell = 0.1
        cloud = lattice_cloud(20, cell, 0.02, rng)
        grid = rasterize(cloud, GridMapParams(cell_size=cell, bounds=(0, 0, 2.0, 2.0)))
        field = FlowField(
            seed_xy=np.array([[5, 5], [7, 5], [9, 5]]),
            flow=np.zeros((3, 2)),
            cost=np.zeros(3),
            seed_spacing=2,
            grid_shape=grid.shape,
            init=IDENT,
        )
        with pytest.raises(InsufficientCorrespondencesError):
            lift_to_3d(field, grid, grid)

    def test_dump_correspondences(self, tmp_path):
        rng = np.random.default_rng(5)
        cell = 0.1
        cloud = lattice_cloud(20, cell, 0.02, rng)
        grid = rasterize(cloud, GridMapParams(cell_size=cell, bounds=(0, 0, 2.0, 2.0)))
        field = FlowField(
            seed_xy=np.array([[5, 5], [7, 5], [9, 5], [11, 5]]),
            flow=np.zeros((4, 2)),
            cost=np.zeros(4),
            seed_spacing=2,
            grid_shape=grid.shape,
            init=IDENT,
        )
        corr = lift_to_3d(field, grid, grid)
        path = tmp_path / "corr.csv"
        dump_correspondences(corr, path)
        rows = path.read_text().strip().splitlines()
        assert rows[0] == "px,py,pz,qx,qy,qz"
        assert len(rows) == len(corr) + 1
