"""Transform estimation: preliminary anisotropic affine fit from sparse
correspondences, vegetation filtering, affine coherent-point-drift
refinement, an affine ICP baseline, and the full pipeline orchestration.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.sparse import coo_matrix, diags
from scipy.spatial import ConvexHull, Delaunay, QhullError, cKDTree

from .cloud_io import initial_alignment
from .errors import (
    DegenerateCorrespondencesError,
    EmptyVegetationError,
    FieldRegError,
    InsufficientCorrespondencesError,
    SolverDivergenceError,
)
from .flow import FlowParams, estimate_flow
from .geometry import (
    AnisoAffine,
    ColoredGeoCloud,
    GeneralAffine,
    RegistrationReport,
    compose,
    stack_correspondences,
)
from .gridmap import GridMapParams, exg, rasterize
from .metrics import SuccessThresholds, classify, compare
from .voting import VoteParams, lift_to_3d, vote_flows

_AXES = "xyz"


@dataclass(frozen=True)
class CpdParams:
    """Coherent-point-drift refinement settings.

    w is the uniform-outlier mixture weight.  Clouds larger than
    max_points are uniformly subsampled with a generator seeded by seed,
    keeping the E-step quadratic cost bounded.  init is folded into the
    returned transform.
    """

    w: float = 0.1
    max_iterations: int = 150
    tolerance: float = 1e-8
    init: AnisoAffine = field(default_factory=AnisoAffine.identity)
    max_points: int = 20_000
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.w < 1.0:
            raise ValueError("outlier weight w must lie in [0, 1)")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.max_points < 1:
            raise ValueError("max_points must be at least 1")


@dataclass(frozen=True)
class VegFilterParams:
    """Vegetation selection by per-point excess-green thresholding."""

    mode: str = "fixed"
    threshold: float = 0.1

    def __post_init__(self):
        if self.mode not in ("fixed", "automatic"):
            raise ValueError("mode must be 'fixed' or 'automatic'")
        if self.mode == "fixed" and not -2.0 <= self.threshold <= 2.0:
            raise ValueError("fixed threshold must lie in [-2, 2]")


def _objective(p, q, scale, rot, trans):
    return float(np.sum((p - (scale * (q @ rot.T)) - trans) ** 2))


def _check_observable(q):
    qc = q - q.mean(axis=0)
    cov = qc.T @ qc
    vals, vecs = np.linalg.eigh(cov)
    rel = vals / max(vals[-1], 1e-300)
    if rel[0] < 1e-12:
        axis = _AXES[int(np.argmax(np.abs(vecs[:, 0])))]
        raise DegenerateCorrespondencesError(
            f"correspondences leave the {axis} scale unobservable "
            "(zero spread along that direction)",
            axis=axis,
        )


def _solve_aniso(p: np.ndarray, q: np.ndarray):
    """Alternating closed-form fit of p ~ diag(s) R q + t.

    With s fixed, (R, t) comes from orthogonal Procrustes on the
    inverse-scale-adjusted points plus the centroid formula; with R
    fixed, each scale axis has an exact ratio solution.  Starts at unit
    scale, stops when the objective change drops below 1e-12 (relative)
    or after 100 rounds.

    The Procrustes sub-step is exact only under isotropic scale, so a
    proposed (R, s) pair that fails to lower the objective is rejected
    and iteration stops there; the recorded objective sequence is
    therefore strictly decreasing.  Returns (transform, objectives)
    where objectives[0] is the unit-scale starting value and each later
    entry follows one accepted round.
    """
    _check_observable(q)

    p_mean = p.mean(axis=0)
    q_mean = q.mean(axis=0)
    pc = p - p_mean
    qc = q - q_mean

    scale = np.ones(3)
    rot = np.eye(3)
    best = _objective(pc, qc, scale, rot, np.zeros(3))
    objectives = [best]
    for _ in range(100):
        # (R, t) proposal: Procrustes between q and the scale-compensated p
        h = (pc / scale).T @ qc
        u, _, vt = np.linalg.svd(h)
        d = np.sign(np.linalg.det(u @ vt))
        rot_new = u @ np.diag([1.0, 1.0, d]) @ vt

        # scale proposal: exact per-axis minimizer given that rotation
        rq = qc @ rot_new.T
        denom = np.sum(rq * rq, axis=0)
        if np.any(denom < 1e-300):
            axis = _AXES[int(np.argmin(denom))]
            raise DegenerateCorrespondencesError(
                f"rotated correspondences collapse along {axis}", axis=axis
            )
        scale_new = np.sum(pc * rq, axis=0) / denom
        if np.any(scale_new <= 0):
            axis = _AXES[int(np.argmin(scale_new))]
            raise DegenerateCorrespondencesError(
                f"non-positive scale solution along {axis}", axis=axis
            )

        cur = _objective(pc, qc, scale_new, rot_new, np.zeros(3))
        if cur >= best:
            break
        rot, scale = rot_new, scale_new
        converged = best - cur < 1e-12 * max(1.0, abs(best))
        best = cur
        objectives.append(cur)
        if converged:
            break

    trans = p_mean - scale * (rot @ q_mean)
    return AnisoAffine(scale=scale, rotation=rot, translation=trans), objectives


def solve_preliminary(corr) -> AnisoAffine:
    """Least-squares anisotropic affine from point correspondences.

    Minimizes sum ||p_i - diag(s) R q_i - t||^2 over per-axis scales s,
    a rotation R, and a translation t.
    """
    if len(corr) < 4:
        raise InsufficientCorrespondencesError(
            f"need at least 4 correspondences, got {len(corr)}"
        )
    p, q = stack_correspondences(corr)
    transform, _ = _solve_aniso(p, q)
    return transform


def filter_vegetation(
    cloud: ColoredGeoCloud, params: VegFilterParams = VegFilterParams()
) -> ColoredGeoCloud:
    """Subset of points whose excess-green index clears the threshold.

    Automatic mode picks the threshold by maximizing inter-class variance
    over a 256-bin histogram of the per-point values (2-class separation).
    """
    if len(cloud) == 0:
        raise EmptyVegetationError("cannot filter an empty cloud")
    e = exg(cloud.rgb)
    if params.mode == "fixed":
        thr = params.threshold
    else:
        thr = otsu_threshold(e)
    keep = e > thr
    if not np.any(keep):
        raise EmptyVegetationError(
            f"no points above ExG threshold {thr:.4g}; map looks like bare soil"
        )
    return cloud.select(keep)


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """2-class threshold maximizing inter-class variance over a histogram."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    if hi - lo < 1e-12:
        return lo
    hist, edges = np.histogram(values, bins=bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    total = hist.sum()
    w0 = np.cumsum(hist)
    w1 = total - w0
    m0 = np.cumsum(hist * centers)
    m_total = m0[-1]
    valid = (w0 > 0) & (w1 > 0)
    mu0 = np.where(valid, m0 / np.maximum(w0, 1), 0.0)
    mu1 = np.where(valid, (m_total - m0) / np.maximum(w1, 1), 0.0)
    var_between = np.where(valid, w0 * w1 * (mu0 - mu1) ** 2, -np.inf)
    k = int(np.argmax(var_between))
    return float(edges[k + 1])


# above this many centroid-data pairs the EM expectation sweep switches
# from exact dense evaluation to KD-tree neighborhoods
_DENSE_PAIR_LIMIT = 4_000_000


def _subsample(xyz: np.ndarray, cap: int, rng: np.random.Generator) -> np.ndarray:
    if len(xyz) <= cap:
        return xyz
    idx = rng.choice(len(xyz), size=cap, replace=False)
    return xyz[np.sort(idx)]


def refine_cpd(
    a_veg: ColoredGeoCloud, g_veg: ColoredGeoCloud, params: CpdParams = CpdParams()
):
    """Affine EM refinement of the preliminary alignment.

    The ground cloud is taken in its original frame; params.init is
    applied up front and folded into the returned transform, so the
    result maps original ground coordinates into the aerial frame.
    The init-transformed ground points act as the moving mixture
    centroids and the aerial points as the observed data: the ground
    view covers only part of the field, so the outlier weight w absorbs
    the aerial points its footprint cannot explain.  sigma^2 starts at
    the nearest-neighbor residual scale rather than the all-pairs
    average; a diffuse start would discard the initial guess and match
    global moments, which shrinks or stretches a partially overlapping
    pair instead of refining it.
    Returns (transform: GeneralAffine, sigma2: float, trace: list of
    per-iteration negative log-likelihoods).
    """
    if len(a_veg) == 0 or len(g_veg) == 0:
        raise EmptyVegetationError("refinement requires two non-empty clouds")
    # identical seeds per draw keep equal inputs equal after subsampling
    x = _subsample(
        np.asarray(a_veg.xyz, dtype=np.float64),
        params.max_points,
        np.random.default_rng(params.seed),
    )
    y0 = _subsample(
        np.asarray(g_veg.xyz, dtype=np.float64),
        params.max_points,
        np.random.default_rng(params.seed),
    )
    y = params.init.apply(y0)

    n, m = len(x), len(y)
    w = params.w

    b = np.eye(3)
    t = np.zeros(3)
    sx2 = float(np.sum(x * x))
    floor = 1e-12 * max(sx2 / max(n, 1), 1e-30)
    d_nn, _ = cKDTree(x).query(y, workers=-1)
    # starting above the residual scale lets soft associations wash out
    # the thin canopy z structure, which sends the affine z column into
    # a shear-compensated collapse; the residual scale itself is enough
    # of a basin because it already includes the init misalignment
    sigma2 = max(float(np.mean(d_nn * d_nn)), floor)

    nll_trace = []
    prev_nll = math.inf
    chunk = max(1, int(2e7) // max(m, 1))
    truncated = n * m > _DENSE_PAIR_LIMIT
    tree_x = cKDTree(x) if truncated else None
    for _ in range(params.max_iterations):
        ty = y @ b.T + t
        c = (2.0 * math.pi * sigma2) ** 1.5 * w * m / ((1.0 - w) * n) if w > 0 else 0.0

        log_front = math.log((1.0 - w) / m) - 1.5 * math.log(2.0 * math.pi * sigma2)
        if truncated:
            # beyond ~7 sigma a pair's weight is under 1e-10 of the peak,
            # so neighborhood queries reproduce the dense sweep far below
            # the convergence tolerance at near-linear cost; the radius
            # cap bounds memory when sigma grows on a diverging fit
            r = min(7.0 * math.sqrt(sigma2), 0.6)
            dmat = cKDTree(ty).sparse_distance_matrix(
                tree_x, r, output_type="coo_matrix"
            )
            k_data = np.exp(-(dmat.data * dmat.data) / (2.0 * sigma2))
            ksp = coo_matrix((k_data, (dmat.row, dmat.col)), shape=(m, n)).tocsr()
            s = np.asarray(ksp.sum(axis=0)).ravel()
            denom = s + c
            bad = denom <= 0
            if np.any(bad):
                denom = np.where(bad, 1e-300, denom)
            pt1 = s / denom
            post = ksp @ diags(1.0 / denom)
            p1 = np.asarray(post.sum(axis=1)).ravel()
            px = np.asarray(post @ x)
            with np.errstate(divide="ignore"):
                nll = -(
                    float(np.sum(np.log(np.maximum(denom, 1e-300)))) + log_front * n
                )
        else:
            pt1 = np.empty(n)
            p1 = np.zeros(m)
            px = np.zeros((m, 3))
            nll = 0.0
            for lo in range(0, n, chunk):
                xs = x[lo : lo + chunk]
                d2 = (
                    np.sum(xs * xs, axis=1)[None, :]
                    - 2.0 * ty @ xs.T
                    + np.sum(ty * ty, axis=1)[:, None]
                )
                # the expanded form can dip below zero by roundoff, which a
                # tiny sigma^2 would amplify into an overflowing exponential
                k = np.exp(-np.maximum(d2, 0.0) / (2.0 * sigma2))
                s = k.sum(axis=0)
                denom = s + c
                bad = denom <= 0
                if np.any(bad):
                    denom = np.where(bad, 1e-300, denom)
                post = k / denom[None, :]
                pt1[lo : lo + chunk] = s / denom
                p1 += post.sum(axis=1)
                px += post @ xs
                with np.errstate(divide="ignore"):
                    nll -= float(
                        np.sum(np.log(np.maximum(denom, 1e-300)))
                    ) + log_front * len(xs)

        if math.isnan(nll) or nll == math.inf:
            raise SolverDivergenceError("refinement objective became non-finite")
        nll_trace.append(nll)

        np_sum = float(pt1.sum())
        if np_sum <= 0:
            raise SolverDivergenceError("all points classified as outliers")

        mu_x = x.T @ pt1 / np_sum
        mu_y = y.T @ p1 / np_sum
        c1 = px.T @ y - np_sum * np.outer(mu_x, mu_y)
        c2 = (y * p1[:, None]).T @ y - np_sum * np.outer(mu_y, mu_y)
        try:
            b = np.linalg.solve(c2.T, c1.T).T
        except np.linalg.LinAlgError as e:
            raise SolverDivergenceError(f"singular system in affine update: {e}") from None
        t = mu_x - b @ mu_y

        trx = float(np.sum((x * x) * pt1[:, None])) - np_sum * float(mu_x @ mu_x)
        sigma2_new = (trx - float(np.trace(c1 @ b.T))) / (3.0 * np_sum)
        if not math.isfinite(sigma2_new):
            raise SolverDivergenceError("sigma^2 became non-finite")
        sigma2 = max(sigma2_new, floor)
        if sigma2_new <= floor:
            # the mixture collapsed onto the data: an (essentially) exact fit
            break
        if abs(prev_nll - nll) < params.tolerance * max(1.0, abs(prev_nll)):
            prev_nll = nll
            break
        prev_nll = nll

    # (b, t) moves the init-transformed ground centroids onto the aerial
    # data, so stacking it on init maps original ground to aerial
    refined = compose(GeneralAffine(b, t), params.init.to_general())
    return refined, sigma2, nll_trace


def baseline_affine_icp(
    a_veg: ColoredGeoCloud,
    g_veg: ColoredGeoCloud,
    init: AnisoAffine,
    max_iter: int = 50,
    tol: float = 1e-8,
) -> AnisoAffine:
    """Nearest-neighbor iteration alternated with the closed-form solver.

    Each round re-fits from the original ground coordinates so the result
    stays a scale-rotation-translation transform rather than a drifting
    composition.
    """
    if len(a_veg) == 0 or len(g_veg) == 0:
        raise EmptyVegetationError("baseline requires two non-empty clouds")
    if len(a_veg) < 4 or len(g_veg) < 4:
        raise InsufficientCorrespondencesError("need at least 4 points per cloud")
    p_all = np.asarray(a_veg.xyz, dtype=np.float64)
    q_all = np.asarray(g_veg.xyz, dtype=np.float64)
    tree = cKDTree(p_all)
    current = init
    prev = math.inf
    for _ in range(max_iter):
        moved = current.apply(q_all)
        _, idx = tree.query(moved, workers=-1)
        try:
            current, _ = _solve_aniso(p_all[idx], q_all)
        except DegenerateCorrespondencesError as e:
            raise SolverDivergenceError(
                f"nearest-neighbor associations became degenerate: {e}"
            ) from None
        obj = float(np.mean(np.sum((p_all[idx] - current.apply(q_all)) ** 2, axis=1)))
        if obj <= tol or abs(prev - obj) <= tol * max(1.0, abs(prev)):
            break
        prev = obj
    return current


def _crop_to_footprint(cloud: ColoredGeoCloud, moved_xy: np.ndarray, margin: float):
    """Restrict the aerial cloud to the region the moved template covers.

    The convex hull of the template footprint, dilated by roughly
    ``margin``, bounds the aerial points the refinement is asked to
    explain.  Aerial structure beyond the template's reach exerts no
    pull when absent, but inside a loose region it bribes the affine
    fit into stretching the template over it, so the margin should stay
    at the scale of the preliminary transform's own error.
    """
    xy = cloud.xyz[:, :2]
    try:
        hull = ConvexHull(moved_xy)
        verts = moved_xy[hull.vertices]
        centroid = verts.mean(axis=0)
        d = verts - centroid
        norm = np.maximum(np.linalg.norm(d, axis=1), 1e-12)
        verts = centroid + d * (1.0 + margin / norm)[:, None]
        keep = Delaunay(verts).find_simplex(xy) >= 0
    except QhullError:
        lo = moved_xy.min(axis=0) - margin
        hi = moved_xy.max(axis=0) + margin
        keep = np.all((xy >= lo) & (xy <= hi), axis=1)
    if not np.any(keep):
        return cloud
    return cloud.select(keep)


def _tag(stage: str, exc: FieldRegError) -> FieldRegError:
    exc.stage = stage
    return exc


def register(
    aerial: ColoredGeoCloud,
    ground: ColoredGeoCloud,
    grid_params: GridMapParams = GridMapParams(),
    flow_params: FlowParams = FlowParams(),
    vote_params: VoteParams = VoteParams(),
    veg_params: VegFilterParams = VegFilterParams(),
    cpd_params: CpdParams = CpdParams(),
    thresholds: SuccessThresholds = SuccessThresholds(),
    rng: np.random.Generator | None = None,
    truth: AnisoAffine | None = None,
    crop_margin: float = 0.05,
) -> RegistrationReport:
    """Full aerial-ground alignment.

    Geotag-based initial guess, grid map construction, seed flow matching,
    flow voting, correspondence lifting, closed-form preliminary solve,
    vegetation filtering, then affine refinement restricted to the aerial
    region the preliminary transform predicts the ground view covers.
    With truth given, the report also carries the three error metrics and
    the success verdict.
    """
    if rng is None:
        rng = np.random.default_rng(0)

    stage = "initial-alignment"
    try:
        init = initial_alignment(aerial, ground)

        stage = "rasterize"
        grid_a = rasterize(aerial, grid_params)
        grid_g = rasterize(ground, grid_params)

        stage = "flow"
        flows = estimate_flow(grid_a, grid_g, init, flow_params, rng)

        stage = "voting"
        winners = vote_flows(flows, vote_params)

        stage = "correspond"
        corr = lift_to_3d(winners, grid_a, grid_g)

        stage = "preliminary"
        preliminary = solve_preliminary(corr)

        stage = "vegetation"
        a_veg = filter_vegetation(aerial, veg_params)
        g_veg = filter_vegetation(ground, veg_params)

        stage = "refinement"
        moved = preliminary.apply(g_veg.xyz)
        a_roi = _crop_to_footprint(a_veg, moved[:, :2], crop_margin)
        refined, sigma2, nll_trace = refine_cpd(
            a_roi, g_veg, replace(cpd_params, init=preliminary)
        )
    except FieldRegError as exc:
        raise _tag(stage, exc)

    refined_aniso, shear = refined.decompose()
    diagnostics = {
        "n_seeds": len(flows),
        "n_winners": len(winners),
        "n_correspondences": len(corr),
        "sigma2": sigma2,
        "nll_iterations": len(nll_trace),
        "shear_residual": shear,
        "aerial_veg_points": len(a_veg),
        "ground_veg_points": len(g_veg),
    }
    e_t = e_r = e_s = None
    success = None
    if truth is not None:
        e_t, e_r, e_s = compare(refined_aniso, truth)
        success = classify((e_t, e_r, e_s), thresholds)

    return RegistrationReport(
        stage_initial=init,
        stage_preliminary=preliminary,
        stage_refined=refined_aniso,
        refined_matrix=refined.as_matrix(),
        refined_exact=shear <= 1e-6,
        e_t=e_t,
        e_R=e_r,
        e_s=e_s,
        success=success,
        diagnostics=diagnostics,
    )
