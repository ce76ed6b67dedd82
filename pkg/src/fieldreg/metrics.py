"""Transform error metrics, success classification, and sweep CSV output."""

import math
from dataclasses import dataclass

import numpy as np

from .geometry import AnisoAffine


@dataclass(frozen=True)
class SuccessThresholds:
    """An alignment counts as a success when every error is at or below
    its bound: translation in meters, rotation in radians, scale as a
    fractional deviation."""

    max_e_t: float = 0.05
    max_e_R: float = 0.1
    max_e_s: float = 0.025

    def __post_init__(self):
        if min(self.max_e_t, self.max_e_R, self.max_e_s) <= 0:
            raise ValueError("thresholds must be positive")


def compare(
    est: AnisoAffine, truth: AnisoAffine, scale_error_mode: str = "l2"
) -> tuple[float, float, float]:
    """(e_t, e_R, e_s) between an estimate and the ground truth.

    e_t is the Euclidean distance between translations.  e_R is the
    geodesic angle acos((trace(R_est^T R_truth) - 1) / 2), clamped so
    numerically orthonormal inputs cannot produce NaN.  e_s measures the
    per-axis scale ratios' deviation from one: their L2 norm by default,
    or the worst axis with scale_error_mode="max".
    """
    e_t = float(np.linalg.norm(est.translation - truth.translation))
    tr = float(np.trace(est.rotation.T @ truth.rotation))
    e_r = math.acos(min(1.0, max(-1.0, (tr - 1.0) / 2.0)))
    dev = est.scale / truth.scale - 1.0
    if scale_error_mode == "l2":
        e_s = float(np.linalg.norm(dev))
    elif scale_error_mode == "max":
        e_s = float(np.max(np.abs(dev)))
    else:
        raise ValueError(f"unknown scale_error_mode {scale_error_mode!r}")
    return e_t, e_r, e_s


def classify(errors, thresholds: SuccessThresholds = SuccessThresholds()) -> bool:
    """True when all three errors are at or below their thresholds.

    Accepts an (e_t, e_R, e_s) triple or any object with e_t, e_R, e_s
    attributes (a registration report).  Non-finite errors fail.
    """
    if hasattr(errors, "e_t"):
        e_t, e_r, e_s = errors.e_t, errors.e_R, errors.e_s
    else:
        e_t, e_r, e_s = errors
    if e_t is None or e_r is None or e_s is None:
        return False
    if not (math.isfinite(e_t) and math.isfinite(e_r) and math.isfinite(e_s)):
        return False
    return (
        e_t <= thresholds.max_e_t
        and e_r <= thresholds.max_e_R
        and e_s <= thresholds.max_e_s
    )


@dataclass(frozen=True)
class TrialResult:
    """One sweep trial: the initial perturbation magnitudes it was run
    under, the resulting errors, and the success verdict."""

    trial: int
    dt_init: float
    dpsi_init: float
    ds_init: float
    e_t: float
    e_R: float
    e_s: float
    success: bool
    method: str


SWEEP_HEADER = "trial,dt_init,dpsi_init,ds_init,e_t,e_R,e_s,success,method"


def write_sweep_csv(rows, path) -> None:
    """Deterministic CSV: rows sorted by (method, trial), repr-format floats."""
    ordered = sorted(rows, key=lambda r: (r.method, r.trial))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(SWEEP_HEADER + "\n")
        for r in ordered:
            fh.write(
                f"{r.trial},{repr(float(r.dt_init))},{repr(float(r.dpsi_init))},"
                f"{repr(float(r.ds_init))},{repr(float(r.e_t))},{repr(float(r.e_R))},"
                f"{repr(float(r.e_s))},{int(r.success)},{r.method}\n"
            )


def read_sweep_csv(path) -> list[TrialResult]:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != SWEEP_HEADER:
            raise ValueError(f"unexpected sweep CSV header: {header!r}")
        rows = []
        for line in fh:
            t, dt, dpsi, ds, et, er, es, ok, method = line.strip().split(",")
            rows.append(
                TrialResult(
                    trial=int(t), dt_init=float(dt), dpsi_init=float(dpsi),
                    ds_init=float(ds), e_t=float(et), e_R=float(er),
                    e_s=float(es), success=bool(int(ok)), method=method,
                )
            )
    return rows
