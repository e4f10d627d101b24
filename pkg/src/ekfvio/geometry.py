"""Quaternion algebra and rigid transforms.

Quaternions are stored as numpy arrays ``[w, x, y, z]`` (Hamilton product).
Filter orientations are *world-to-IMU*: ``quat_to_rotation(q) @ v_world``
gives the vector in IMU coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_EPS_SMALL_ANGLE = 1e-4


def skew(v) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q)


def quat_canonical(q) -> np.ndarray:
    """Sign convention used only when writing quaternions out (w >= 0)."""
    q = np.asarray(q, dtype=float)
    return -q if q[0] < 0 else q.copy()


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[np.cos(half)], np.sin(half) * axis])


def quat_from_rotvec(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    angle = np.linalg.norm(v)
    if angle < 1e-12:
        return quat_normalize(np.concatenate([[1.0], 0.5 * v]))
    return quat_from_axis_angle(v / angle, angle)


def _omega_generator(u) -> np.ndarray:
    ux, uy, uz = u
    return np.array([
        [0.0, -ux, -uy, -uz],
        [ux, 0.0, -uz, uy],
        [uy, uz, 0.0, -ux],
        [uz, -uy, ux, 0.0],
    ])


def _half_angle_terms(theta: float):
    """Return cos(theta/2), sin(theta/2)/theta and d/dtheta of the latter divided by theta."""
    c = np.cos(0.5 * theta)
    if theta < _EPS_SMALL_ANGLE:
        t2 = theta * theta
        f = 0.5 - t2 / 48.0
        g = -1.0 / 24.0 + t2 / 960.0
    else:
        s = np.sin(0.5 * theta)
        f = s / theta
        g = (0.5 * c * theta - s) / theta ** 3
    return c, f, g


def omega_matrix(u) -> np.ndarray:
    """Orthogonal 4x4 matrix advancing a world-to-local quaternion by rotation vector ``u``.

    Closed form of ``expm(-0.5 * M(u))``: the generator squares to ``-|u|^2 I``.
    """
    u = np.asarray(u, dtype=float)
    c, f, _ = _half_angle_terms(float(np.linalg.norm(u)))
    return c * np.eye(4) - f * _omega_generator(u)


def _left_product_basis(q) -> np.ndarray:
    # M(u) @ q == B(q) @ u
    w, x, y, z = q
    return np.array([
        [-x, -y, -z],
        [w, z, -y],
        [-z, w, x],
        [y, -x, w],
    ])


def omega_product_jacobian(u, q) -> np.ndarray:
    """d(omega_matrix(u) @ q) / du, shape (4, 3)."""
    u = np.asarray(u, dtype=float)
    q = np.asarray(q, dtype=float)
    _, f, g = _half_angle_terms(float(np.linalg.norm(u)))
    B = _left_product_basis(q)
    Bu = B @ u
    return -0.5 * f * np.outer(q, u) - g * np.outer(Bu, u) - f * B


def _rotation_homogeneous(q) -> np.ndarray:
    w = q[0]
    v = np.asarray(q[1:])
    return (w * w - v @ v) * np.eye(3) + 2.0 * np.outer(v, v) + 2.0 * w * skew(v)


def quat_to_rotation(q) -> np.ndarray:
    """Rotation matrix of ``q``; the quaternion is normalized implicitly."""
    q = np.asarray(q, dtype=float)
    return _rotation_homogeneous(q) / (q @ q)


_BASIS = np.eye(3)


def rotation_derivative(q) -> np.ndarray:
    """dR(q)/dq_j stacked as shape (4, 3, 3), including the implicit normalization."""
    q = np.asarray(q, dtype=float)
    w = q[0]
    v = q[1:]
    n2 = q @ q
    Rh = _rotation_homogeneous(q)
    dRh = np.empty((4, 3, 3))
    dRh[0] = 2.0 * w * np.eye(3) + 2.0 * skew(v)
    for k in range(3):
        e = _BASIS[k]
        dRh[k + 1] = (-2.0 * v[k] * np.eye(3) + 2.0 * (np.outer(e, v) + np.outer(v, e))
                      + 2.0 * w * skew(e))
    return dRh / n2 - (2.0 / (n2 * n2)) * q[:, None, None] * Rh[None]


def rotate_jacobian(q, a) -> np.ndarray:
    """d(R(q) a)/dq, shape (3, 4)."""
    return np.einsum("jab,b->aj", rotation_derivative(q), np.asarray(a, dtype=float))


def rotate_transpose_jacobian(q, a) -> np.ndarray:
    """d(R(q)^T a)/dq, shape (3, 4)."""
    return np.einsum("jba,b->aj", rotation_derivative(q), np.asarray(a, dtype=float))


def rotation_to_quat(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s,
                      (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s,
                      (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s,
                      (R[1, 2] + R[2, 1]) / s])
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s,
                      (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    return quat_normalize(q)


def so3_exp(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-8:
        return np.eye(3) + K + 0.5 * K @ K
    return (np.eye(3) + np.sin(theta) / theta * K
            + (1.0 - np.cos(theta)) / theta ** 2 * K @ K)


def so3_log(R) -> np.ndarray:
    R = np.asarray(R, dtype=float)
    cos_theta = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    theta = np.arccos(cos_theta)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-6:
        return 0.5 * w
    if np.pi - theta < 1e-4:
        # near pi the antisymmetric part vanishes; take the axis from R + I
        M = 0.5 * (R + np.eye(3))
        axis = M[np.argmax(np.diag(M))]
        axis = axis / np.linalg.norm(axis)
        if axis @ w < 0:
            axis = -axis
        return theta * axis
    return theta / (2.0 * np.sin(theta)) * w


def so3_right_jacobian_inv(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-6:
        return np.eye(3) + 0.5 * K + K @ K / 12.0
    coef = 1.0 / theta ** 2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * K + coef * K @ K


def rotate_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotate_y(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotate_x(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def yaw_of(R) -> float:
    """Heading of a body-to-world rotation in the z-y-x Euler convention."""
    return float(np.arctan2(R[1, 0], R[0, 0]))


def kabsch(a: np.ndarray, b: np.ndarray, with_translation: bool = True):
    """Rotation R (and t) minimizing sum |b_i - (R a_i + t)|^2."""
    if with_translation:
        ca, cb = a.mean(axis=0), b.mean(axis=0)
    else:
        ca = cb = np.zeros(3)
    H = (a - ca).T @ (b - cb)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return R, cb - R @ ca


@dataclass(frozen=True)
class RigidTransform:
    """Rotation + translation acting as ``x -> rotation @ x + translation``."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=float).reshape(3, 3))
        object.__setattr__(self, "translation",
                           np.asarray(self.translation, dtype=float).reshape(3))

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T) -> "RigidTransform":
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.rotation
        T[:3, 3] = self.translation
        return T

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    def __matmul__(self, other: "RigidTransform") -> "RigidTransform":
        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation + self.translation)

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.translation

    def is_valid(self, tol: float = 1e-9) -> bool:
        R = self.rotation
        return (np.allclose(R @ R.T, np.eye(3), atol=tol)
                and abs(np.linalg.det(R) - 1.0) < tol)


def camera_pose(position, orientation, imu_from_camera: RigidTransform) -> RigidTransform:
    """Camera-to-world transform for an IMU pose ``(p, q)`` with world-to-IMU ``q``."""
    imu_to_world = RigidTransform(quat_to_rotation(orientation).T, position)
    return imu_to_world @ imu_from_camera


def gravity_aligned_quaternion(specific_force) -> np.ndarray:
    """World-to-IMU quaternion whose world z-axis matches the measured specific force; zero yaw."""
    f = np.asarray(specific_force, dtype=float)
    roll = np.arctan2(f[1], f[2])
    pitch = np.arctan2(-f[0], np.hypot(f[1], f[2]))
    body_to_world = rotate_y(pitch) @ rotate_x(roll)
    return rotation_to_quat(body_to_world.T)
