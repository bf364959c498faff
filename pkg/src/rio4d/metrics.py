"""Absolute trajectory error after rigid alignment."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geom import DegenerateGeometry, Pose, Quaternion, umeyama_align
from .io import Trajectory


class NoAssociations(ValueError):
    pass


@dataclass(frozen=True)
class AteResult:
    rmse: float
    errors: np.ndarray  # per associated pose, metres
    timestamps: np.ndarray  # estimate timestamps that found a reference pose
    alignment: Pose  # maps estimate positions onto the reference

    @property
    def mean(self) -> float:
        return float(np.mean(self.errors))

    @property
    def max(self) -> float:
        return float(np.max(self.errors))

    def as_dict(self) -> dict:
        return {
            "rmse": self.rmse,
            "mean": self.mean,
            "max": self.max,
            "poses": int(len(self.errors)),
        }


def associate(t_est: np.ndarray, t_ref: np.ndarray, tolerance: float = 0.01) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs matching each estimate stamp to the nearest reference stamp within ``tolerance``."""
    t_est = np.asarray(t_est, dtype=float)
    t_ref = np.asarray(t_ref, dtype=float)
    if len(t_est) == 0 or len(t_ref) == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    j = np.searchsorted(t_ref, t_est)
    lo = np.clip(j - 1, 0, len(t_ref) - 1)
    hi = np.clip(j, 0, len(t_ref) - 1)
    pick = np.where(np.abs(t_ref[lo] - t_est) <= np.abs(t_ref[hi] - t_est), lo, hi)
    ok = np.abs(t_ref[pick] - t_est) <= tolerance
    return np.nonzero(ok)[0], pick[ok]


def _fallback_alignment(est: np.ndarray, ref: np.ndarray) -> Pose:
    # the rotation about a common line is arbitrary, the residuals are not
    mu_e, mu_r = est.mean(axis=0), ref.mean(axis=0)
    if len(est) < 2:
        return Pose(Quaternion.identity(), mu_r - mu_e)
    U, _, Vt = np.linalg.svd((ref - mu_r).T @ (est - mu_e))
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    return Pose(Quaternion.from_matrix(R), mu_r - R @ mu_e)


def evaluate_ate(est: Trajectory, ref: Trajectory, tolerance: float = 0.01, align: bool = True) -> AteResult:
    i, j = associate(est.timestamps, ref.timestamps, tolerance)
    if len(i) == 0:
        raise NoAssociations(f"no estimate timestamp lies within {tolerance} s of a reference timestamp")
    pe = est.positions[i]
    pr = ref.positions[j]
    if align:
        try:
            T = umeyama_align(pe, pr)
        except DegenerateGeometry:
            T = _fallback_alignment(pe, pr)
    else:
        T = Pose()
    err = np.linalg.norm(T.apply(pe) - pr, axis=1)
    return AteResult(float(np.sqrt(np.mean(err**2))), err, est.timestamps[i], T)
