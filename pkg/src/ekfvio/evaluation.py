"""Absolute trajectory error with rigid (no scale) alignment."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import kabsch, quat_to_rotation
from .trajectory import Trajectory


class EvaluationError(ValueError):
    pass


def associate(est_times, gt_times, max_dt: float = 0.02):
    """Nearest-neighbour timestamp matching; returns index arrays (est, gt)."""
    est_times = np.asarray(est_times, dtype=float)
    gt_times = np.asarray(gt_times, dtype=float)
    if len(gt_times) == 0 or len(est_times) == 0:
        return np.zeros(0, int), np.zeros(0, int)
    j = np.clip(np.searchsorted(gt_times, est_times), 1, max(len(gt_times) - 1, 1))
    if len(gt_times) == 1:
        nearest = np.zeros(len(est_times), dtype=int)
    else:
        left = j - 1
        nearest = np.where(np.abs(gt_times[left] - est_times) <= np.abs(gt_times[j] - est_times),
                           left, j)
    ok = np.abs(gt_times[nearest] - est_times) <= max_dt
    return np.flatnonzero(ok), nearest[ok]


@dataclass
class AteResult:
    rmse_m: float
    aligned: np.ndarray          # aligned estimate positions (matched rows)
    truth: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    matches: int


def evaluate_ate(estimate: Trajectory, truth: Trajectory, max_dt: float = 0.02) -> AteResult:
    ie, ig = associate(estimate.times, truth.times, max_dt)
    if len(ie) < 3:
        raise EvaluationError(f"only {len(ie)} time-matched poses (need >= 3)")
    P = estimate.positions[ie]
    Q = truth.positions[ig]
    R, t = kabsch(P, Q)
    aligned = P @ R.T + t
    rmse = float(np.sqrt(np.mean(np.sum((aligned - Q) ** 2, axis=1))))
    return AteResult(rmse, aligned, Q, R, t, len(ie))


def position_nees(estimate: Trajectory, truth: Trajectory, max_dt: float = 0.02) -> np.ndarray:
    """Per-frame position NEES ``e^T P^-1 e``.

    The estimate lives in a frame anchored at its first pose, so the truth is
    mapped into it through the first matched pose pair (no fitting: a least
    squares alignment would absorb part of the error the covariance describes).
    """
    if estimate.position_covariances is None:
        raise EvaluationError("estimate carries no position covariances")
    ie, ig = associate(estimate.times, truth.times, max_dt)
    if len(ie) < 2:
        raise EvaluationError(f"only {len(ie)} time-matched poses (need >= 2)")
    A = quat_to_rotation(estimate.quaternions[ie[0]]) @ quat_to_rotation(truth.quaternions[ig[0]]).T
    e = (estimate.positions[ie] - estimate.positions[ie[0]]
         - (truth.positions[ig] - truth.positions[ig[0]]) @ A.T)
    P = estimate.position_covariances[ie]
    return np.einsum("ni,ni->n", e, np.linalg.solve(P, e[..., None])[..., 0])
