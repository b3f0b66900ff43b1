"""Trajectory alignment and absolute trajectory error."""

from __future__ import annotations

import numpy as np

from .dataio import associate
from .geometry import Pose


class RankDeficient(ValueError):
    pass


def umeyama_align(est, gt, with_scale: bool = False):
    """Least-squares (R, t, s) with s R est + t ~ gt.

    Points are rows of (n, 3) arrays.  Scale stays 1 unless ``with_scale``.
    """
    X = np.asarray(est, dtype=np.float64)
    Y = np.asarray(gt, dtype=np.float64)
    if X.shape != Y.shape or X.ndim != 2 or X.shape[1] != 3:
        raise ValueError("expected two (n, 3) point sets")
    if X.shape[0] < 3:
        raise RankDeficient("rank deficient: need at least 3 points")
    mx, my = X.mean(0), Y.mean(0)
    Xc, Yc = X - mx, Y - my
    sx = np.linalg.svd(Xc, compute_uv=False)
    if sx[1] <= 1e-12 * max(sx[0], 1e-300):
        raise RankDeficient("rank deficient: points are collinear")
    if np.array_equal(X, Y):
        # the SVD would return the identity only up to rounding
        return np.eye(3), np.zeros(3), 1.0
    cov = Yc.T @ Xc / X.shape[0]
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = 1.0
    if with_scale:
        var_x = (Xc**2).sum() / X.shape[0]
        s = float(np.trace(np.diag(D) @ S) / var_x)
    t = my - s * R @ mx
    return R, t, s


def _positions(traj) -> np.ndarray:
    if len(traj) and isinstance(traj[0], Pose):
        return np.array([p.translation for p in traj])
    return np.asarray(traj, dtype=np.float64)


def ate_rmse(est_traj, gt_traj, with_scale: bool = False) -> float:
    """RMSE of aligned translational residuals, in centimeters.

    Both inputs are matched pairs: sequences of Poses or (n, 3) positions.
    """
    X, Y = _positions(est_traj), _positions(gt_traj)
    if X.shape[0] < 3:
        raise ValueError("need at least 3 matched poses")
    R, t, s = umeyama_align(X, Y, with_scale)
    err = (s * X @ R.T + t) - Y
    return float(np.sqrt((err**2).sum(1).mean()) * 100.0)


def ate_from_stamped(est_stamps, est_poses, gt_stamps, gt_poses, max_difference: float = 0.02) -> float:
    pairs = associate(list(est_stamps), list(gt_stamps), max_difference)
    return ate_rmse([est_poses[i] for i, _ in pairs], [gt_poses[j] for _, j in pairs])
