"""EKF state layout, IMU propagation, pose-trail bookkeeping and the gated update.

Mean layout::

    [p(3), q(4), v(3), b_a(3), b_w(3), diag(T_a)(3), tau(1), slot_1(7), ..., slot_na(7)]

where every slot holds a past IMU pose ``(p, q)`` with world-to-IMU ``q``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from scipy.stats import chi2

from .geometry import (
    gravity_aligned_quaternion,
    omega_matrix,
    omega_product_jacobian,
    quat_to_rotation,
    rotate_transpose_jacobian,
)

POS = slice(0, 3)
QUAT = slice(3, 7)
VEL = slice(7, 10)
ACC_BIAS = slice(10, 13)
GYRO_BIAS = slice(13, 16)
ACC_SCALE = slice(16, 19)
TIME_SHIFT = 19
BASE_DIM = 20
POSE_DIM = 7


def slot_start(slot: int) -> int:
    """First mean index of trail slot ``slot`` (1-based, as in the pose trail)."""
    return BASE_DIM + POSE_DIM * (slot - 1)


def slot_slice(slot: int) -> slice:
    s = slot_start(slot)
    return slice(s, s + POSE_DIM)


class InitializationError(ValueError):
    pass


class ImuGapError(ValueError):
    """IMU sample with a non-positive or too large time step."""


@dataclass
class NoiseParams:
    """Process/measurement noise. Continuous-time densities are per sqrt(Hz)."""

    acc_noise: float = 2.0e-3          # m/s^2/sqrt(Hz)
    gyro_noise: float = 1.7e-4         # rad/s/sqrt(Hz)
    acc_bias_alpha: float = 1e-3       # 1/s, Ornstein-Uhlenbeck mean reversion
    acc_bias_sigma: float = 3.0e-3
    gyro_bias_alpha: float = 1e-3
    gyro_bias_sigma: float = 2.0e-5
    visual_noise_px: float = 1.5
    unaugment_sigma: float = 1e6
    init_pos_std: float = 1e-4
    init_orient_std: float = 1e-3
    init_vel_std: float = 0.05
    init_acc_bias_std: float = 0.05
    init_gyro_bias_std: float = 0.01
    init_acc_scale_std: float = 0.005
    init_time_shift_std: float = 1e-3
    gravity: float = 9.81
    max_dt: float = 0.1

    def initial_covariance_diagonal(self, n_a: int) -> np.ndarray:
        d = np.empty(BASE_DIM + POSE_DIM * n_a)
        d[POS] = self.init_pos_std ** 2
        d[QUAT] = self.init_orient_std ** 2
        d[VEL] = self.init_vel_std ** 2
        d[ACC_BIAS] = self.init_acc_bias_std ** 2
        d[GYRO_BIAS] = self.init_gyro_bias_std ** 2
        d[ACC_SCALE] = self.init_acc_scale_std ** 2
        d[TIME_SHIFT] = self.init_time_shift_std ** 2
        d[BASE_DIM:] = self.unaugment_sigma ** 2
        return d


@dataclass
class ImuSample:
    timestamp: float
    gyro: np.ndarray
    accel: np.ndarray


@dataclass
class FilterState:
    mean: np.ndarray
    cov: np.ndarray
    time: float
    frame_index: int = 0
    # camera frame index stored in each trail slot (None = empty slot)
    slot_frames: list = field(default_factory=list)

    @property
    def n_a(self) -> int:
        return (len(self.mean) - BASE_DIM) // POSE_DIM

    @property
    def dim(self) -> int:
        return len(self.mean)

    @property
    def position(self) -> np.ndarray:
        return self.mean[POS]

    @property
    def orientation(self) -> np.ndarray:
        return self.mean[QUAT]

    @property
    def velocity(self) -> np.ndarray:
        return self.mean[VEL]

    def slot_pose(self, slot: int):
        m = self.mean[slot_slice(slot)]
        return m[:3], m[3:]

    def copy(self) -> "FilterState":
        return replace(self, mean=self.mean.copy(), cov=self.cov.copy(),
                       slot_frames=list(self.slot_frames))


def ou_increment_variance(sigma: float, alpha: float, dt: float) -> float:
    """Variance added by one Ornstein-Uhlenbeck step; random-walk limit when alpha == 0."""
    if alpha <= 0.0:
        return sigma * sigma * dt
    return sigma * sigma * (-np.expm1(-2.0 * alpha * dt)) / (2.0 * alpha)


def initialize(first_accel_samples, params: NoiseParams, n_a: int, time: float = 0.0,
               min_norm_ratio: float = 0.5) -> FilterState:
    acc = np.atleast_2d(np.asarray(first_accel_samples, dtype=float))
    if acc.size == 0:
        raise InitializationError("no accelerometer samples")
    f = acc.mean(axis=0)
    if np.linalg.norm(f) <= min_norm_ratio * params.gravity:
        raise InitializationError(
            f"mean specific force {np.linalg.norm(f):.3f} m/s^2 too small to find gravity")
    mean = np.zeros(BASE_DIM + POSE_DIM * n_a)
    mean[QUAT] = gravity_aligned_quaternion(f)
    mean[ACC_SCALE] = 1.0
    cov = np.diag(params.initial_covariance_diagonal(n_a))
    return FilterState(mean, cov, time, 0, [None] * n_a)


def propagate_mean(x0: np.ndarray, gyro, accel, dt: float, params: NoiseParams,
                   noise: Optional[np.ndarray] = None) -> np.ndarray:
    """Mechanization of the non-trail state block (length 20).

    ``noise`` is ``(n_acc(3), n_gyro(3), e_acc_bias(3), e_gyro_bias(3))`` with the first
    two added to the bias-corrected accelerometer and gyroscope readings.
    """
    if noise is None:
        noise = np.zeros(12)
    p, q, v = x0[POS], x0[QUAT], x0[VEL]
    ba, bw, ta = x0[ACC_BIAS], x0[GYRO_BIAS], x0[ACC_SCALE]
    acc = ta * accel - ba + noise[0:3]
    omega = gyro - bw + noise[3:6]
    q_new = omega_matrix(omega * dt) @ q
    g = np.array([0.0, 0.0, params.gravity])
    v_new = v + (quat_to_rotation(q_new).T @ acc - g) * dt
    out = x0.copy()
    out[POS] = p + v * dt
    out[QUAT] = q_new
    out[VEL] = v_new
    out[ACC_BIAS] = np.exp(-params.acc_bias_alpha * dt) * ba + noise[6:9]
    out[GYRO_BIAS] = np.exp(-params.gyro_bias_alpha * dt) * bw + noise[9:12]
    return out


def propagation_jacobians(x0: np.ndarray, gyro, accel, dt: float, params: NoiseParams):
    """Analytic (F, G) of :func:`propagate_mean` w.r.t. the 20-dim block and the noise."""
    q, ba, bw, ta = x0[QUAT], x0[ACC_BIAS], x0[GYRO_BIAS], x0[ACC_SCALE]
    acc = ta * accel - ba
    u = (gyro - bw) * dt
    Om = omega_matrix(u)
    q_new = Om @ q
    dq_du = omega_product_jacobian(u, q)
    Rt = quat_to_rotation(q_new).T
    dv_dqn = dt * rotate_transpose_jacobian(q_new, acc)

    I3 = np.eye(3)
    F = np.eye(BASE_DIM)
    F[POS, VEL] = dt * I3
    F[QUAT, QUAT] = Om
    F[QUAT, GYRO_BIAS] = -dt * dq_du
    F[VEL, QUAT] = dv_dqn @ Om
    F[VEL, GYRO_BIAS] = dv_dqn @ (-dt * dq_du)
    F[VEL, ACC_BIAS] = -dt * Rt
    F[VEL, ACC_SCALE] = dt * Rt * accel[None, :]
    F[ACC_BIAS, ACC_BIAS] = np.exp(-params.acc_bias_alpha * dt) * I3
    F[GYRO_BIAS, GYRO_BIAS] = np.exp(-params.gyro_bias_alpha * dt) * I3

    G = np.zeros((BASE_DIM, 12))
    G[VEL, 0:3] = dt * Rt
    G[QUAT, 3:6] = dt * dq_du
    G[VEL, 3:6] = dv_dqn @ (dt * dq_du)
    G[ACC_BIAS, 6:9] = I3
    G[GYRO_BIAS, 9:12] = I3
    return F, G


def process_noise(dt: float, params: NoiseParams) -> np.ndarray:
    """Covariance of the noise vector consumed by :func:`propagate_mean`."""
    q = np.empty(12)
    # white sensor noise averaged over dt; increments then carry sigma^2 * dt
    q[0:3] = params.acc_noise ** 2 / dt
    q[3:6] = params.gyro_noise ** 2 / dt
    q[6:9] = ou_increment_variance(params.acc_bias_sigma, params.acc_bias_alpha, dt)
    q[9:12] = ou_increment_variance(params.gyro_bias_sigma, params.gyro_bias_alpha, dt)
    return np.diag(q)


def predict(state: FilterState, sample: ImuSample, params: NoiseParams) -> FilterState:
    dt = sample.timestamp - state.time
    if not (0.0 < dt <= params.max_dt):
        raise ImuGapError(f"IMU time step {dt:.6f} s outside (0, {params.max_dt}]")
    gyro = np.asarray(sample.gyro, dtype=float)
    accel = np.asarray(sample.accel, dtype=float)
    x0 = state.mean[:BASE_DIM]
    F, G = propagation_jacobians(x0, gyro, accel, dt, params)

    mean = state.mean.copy()
    mean[:BASE_DIM] = propagate_mean(x0, gyro, accel, dt, params)

    P = state.cov
    cov = np.empty_like(P)
    P00 = P[:BASE_DIM, :BASE_DIM]
    cov[:BASE_DIM, :BASE_DIM] = F @ P00 @ F.T + G @ process_noise(dt, params) @ G.T
    cross = F @ P[:BASE_DIM, BASE_DIM:]
    cov[:BASE_DIM, BASE_DIM:] = cross
    cov[BASE_DIM:, :BASE_DIM] = cross.T
    cov[BASE_DIM:, BASE_DIM:] = P[BASE_DIM:, BASE_DIM:]
    cov = 0.5 * (cov + cov.T)
    return replace(state, mean=mean, cov=cov, time=sample.timestamp,
                   slot_frames=list(state.slot_frames))


def least_significant_zero_bit(i: int) -> int:
    """Index (0-based) of the lowest zero bit of ``i``."""
    n = 0
    while i & 1:
        i >>= 1
        n += 1
    return n


def hanoi_discard_index(frame_index: int, n_fifo: int, n_a: int) -> int:
    return int(min(n_a, max(n_fifo, n_a - least_significant_zero_bit(frame_index), 1)))


def choose_discard_index(frame_index: int, n_fifo: int, n_a: int,
                         covisibility: Optional[Sequence[int]] = None) -> int:
    """Trail slot (1-based) to drop on the next augmentation.

    A slot sharing no tracks with the current frame is always dropped first;
    otherwise the FIFO + Towers-of-Hanoi rule applies.
    """
    if n_fifo > n_a:
        raise ValueError("n_fifo must not exceed n_a")
    if covisibility is not None:
        for slot, count in enumerate(covisibility, start=1):
            if count == 0:
                return slot
    return hanoi_discard_index(frame_index, n_fifo, n_a)


def augmentation_indices(dim: int, n_a: int, d: int) -> np.ndarray:
    """Row selection equivalent to the augmentation matrix ``A_d`` (A @ x == x[idx])."""
    n1 = dim - POSE_DIM * n_a
    idx = list(range(n1))
    idx += list(range(POSE_DIM))                       # new slot 1 <- current pose
    for slot in range(2, n_a + 1):
        src = slot - 1 if slot <= d else slot
        idx += list(range(slot_start(src), slot_start(src) + POSE_DIM))
    return np.asarray(idx)


def augmentation_matrix(dim: int, n_a: int, d: int) -> np.ndarray:
    """Dense ``A_d`` built block by block."""
    n1 = dim - POSE_DIM * n_a
    A = np.zeros((dim, dim))
    A[:n1, :n1] = np.eye(n1)
    A[n1:n1 + POSE_DIM, :POSE_DIM] = np.eye(POSE_DIM)
    row = n1 + POSE_DIM
    if d > 1:
        A[row:row + POSE_DIM * (d - 1), n1:n1 + POSE_DIM * (d - 1)] = np.eye(POSE_DIM * (d - 1))
    if d < n_a:
        A[n1 + POSE_DIM * d:, n1 + POSE_DIM * d:] = np.eye(POSE_DIM * (n_a - d))
    return A


def augment_pose(state: FilterState, d: int) -> FilterState:
    n_a = state.n_a
    if not 1 <= d <= n_a:
        raise ValueError(f"discard index {d} outside [1, {n_a}]")
    idx = augmentation_indices(state.dim, n_a, d)
    frames = list(state.slot_frames)
    del frames[d - 1]
    frames.insert(0, state.frame_index)
    return replace(state, mean=state.mean[idx], cov=state.cov[np.ix_(idx, idx)],
                   slot_frames=frames)


def unaugment_pose(state: FilterState, sigma_u: float) -> FilterState:
    """Drop the newest trail pose, shift the rest forward, leave an uninformative last slot."""
    n_a = state.n_a
    if n_a < 1:
        raise ValueError("state has no trail poses")
    keep = np.concatenate([np.arange(BASE_DIM), np.arange(slot_start(2), state.dim)])
    n = state.dim
    mean = np.zeros(n)
    cov = np.zeros((n, n))
    m = len(keep)
    mean[:m] = state.mean[keep]
    cov[:m, :m] = state.cov[np.ix_(keep, keep)]
    cov[m:, m:] = sigma_u ** 2 * np.eye(POSE_DIM)
    frames = list(state.slot_frames[1:]) + [None]
    return replace(state, mean=mean, cov=cov, slot_frames=frames)


def is_stationary(displacements, m_min: float) -> bool:
    """True when every co-observed feature moved less than ``m_min`` pixels."""
    d = np.asarray(displacements, dtype=float).reshape(-1, 2)
    if len(d) == 0:
        return False
    return bool(np.max(np.linalg.norm(d, axis=1)) < m_min)


class UpdateOutcome(enum.Enum):
    ACCEPTED = "accepted"
    GATED = "gated"
    SINGULAR = "singular"

    def __bool__(self) -> bool:
        return self is UpdateOutcome.ACCEPTED


@lru_cache(maxsize=1024)
def chi2_threshold(dof: int, percentile: float) -> float:
    return float(chi2.ppf(percentile, dof))


def normalize_quaternions(mean: np.ndarray, n_a: int) -> None:
    mean[QUAT] /= np.linalg.norm(mean[QUAT])
    for slot in range(1, n_a + 1):
        s = slot_start(slot) + 3
        n = np.linalg.norm(mean[s:s + 4])
        if n > 1e-9:
            mean[s:s + 4] /= n


def gated_update(state: FilterState, residual, jacobian, noise_cov,
                 gate_percentile: Optional[float] = 0.95, columns=None):
    """EKF update with a chi-square innovation gate and Joseph-form covariance.

    ``residual`` is the innovation ``y - h(x)``. When ``columns`` is given,
    ``jacobian`` only holds those state columns (the rest are zero).
    ``gate_percentile=None`` disables the gate.
    Returns ``(new_state, UpdateOutcome)``; the state is returned untouched
    unless the update is accepted.
    """
    r = np.asarray(residual, dtype=float).ravel()
    H = np.asarray(jacobian, dtype=float)
    R = np.asarray(noise_cov, dtype=float)
    P = state.cov
    if columns is None:
        columns = np.arange(state.dim)
    columns = np.asarray(columns)
    PHt = P[:, columns] @ H.T
    S = H @ PHt[columns] + R
    S = 0.5 * (S + S.T)
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        return state, UpdateOutcome.SINGULAR
    diag = np.diag(L)
    if diag.min() <= 1e-9 * diag.max():
        return state, UpdateOutcome.SINGULAR
    z = np.linalg.solve(L, r)
    stat = float(z @ z)
    if gate_percentile is not None and stat >= chi2_threshold(len(r), gate_percentile):
        return state, UpdateOutcome.GATED

    # K = P H^T S^-1
    K = np.linalg.solve(L.T, np.linalg.solve(L, PHt.T)).T
    mean = state.mean + K @ r
    # Joseph form (I - KH) P (I - KH)^T + K R K^T with H sparse in `columns`
    M = P - K @ PHt.T
    cov = M - (M[:, columns] @ H.T) @ K.T + K @ R @ K.T
    cov = 0.5 * (cov + cov.T)
    normalize_quaternions(mean, state.n_a)
    return replace(state, mean=mean, cov=cov, slot_frames=list(state.slot_frames)), \
        UpdateOutcome.ACCEPTED
