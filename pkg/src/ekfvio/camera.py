"""Camera projection models and the stereo rig container."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import RigidTransform, skew

MIN_DEPTH = 1e-6


def _perspective_jacobian(P) -> np.ndarray:
    X, Y, Z = P
    return np.array([[1.0 / Z, 0.0, -X / Z ** 2], [0.0, 1.0 / Z, -Y / Z ** 2]])


def _bearing_jacobian_from_projection(J_proj, bearing) -> np.ndarray:
    # project(b) = pixel with |b| = 1: invert the projection on the tangent plane of the sphere
    A = np.vstack([J_proj, bearing[None, :]])
    rhs = np.vstack([np.eye(2), np.zeros((1, 2))])
    return np.linalg.solve(A, rhs)


@dataclass
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int = 752
    height: int = 480

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def mean_focal(self) -> float:
        return 0.5 * (self.fx + self.fy)

    def in_image(self, pixels, margin: float = 0.0) -> np.ndarray:
        pixels = np.atleast_2d(pixels)
        return ((pixels[:, 0] >= margin) & (pixels[:, 0] <= self.width - 1 - margin)
                & (pixels[:, 1] >= margin) & (pixels[:, 1] <= self.height - 1 - margin))

    def _to_metric(self, pixels):
        pixels = np.atleast_2d(np.asarray(pixels, dtype=float))
        return np.column_stack([(pixels[:, 0] - self.cx) / self.fx,
                                (pixels[:, 1] - self.cy) / self.fy])

    def _to_pixels(self, m):
        return np.column_stack([self.fx * m[:, 0] + self.cx, self.fy * m[:, 1] + self.cy])

    def project(self, points) -> np.ndarray:
        raise NotImplementedError

    def unproject(self, pixels):
        """Unit bearings for ``pixels`` and a boolean mask of successful inversions."""
        raise NotImplementedError

    def project_jacobian(self, point) -> np.ndarray:
        raise NotImplementedError

    def unproject_jacobian(self, pixel) -> np.ndarray:
        """d(unit bearing)/d(pixel), shape (3, 2)."""
        bearings, ok = self.unproject(pixel)
        b = bearings[0]
        return _bearing_jacobian_from_projection(self.project_jacobian(b), b)

    def normalized_coords(self, pixels, min_depth: float = MIN_DEPTH):
        """Undistorted normalized coordinates ``rho(unproject(pixel))`` and a validity mask."""
        bearings, ok = self.unproject(pixels)
        ok = ok & (bearings[:, 2] > min_depth)
        z = np.where(ok, bearings[:, 2], 1.0)
        return bearings[:, :2] / z[:, None], ok


@dataclass
class PinholeRadTan(CameraModel):
    k1: float = 0.0
    k2: float = 0.0
    p1: float = 0.0
    p2: float = 0.0
    max_iterations: int = 20
    tolerance: float = 1e-9

    def distort(self, xn) -> np.ndarray:
        x, y = xn[:, 0], xn[:, 1]
        r2 = x * x + y * y
        radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2
        xd = x * radial + 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x)
        yd = y * radial + self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y
        return np.column_stack([xd, yd])

    def distort_jacobian(self, xn) -> np.ndarray:
        x, y = xn
        r2 = x * x + y * y
        radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2
        dr = self.k1 + 2.0 * self.k2 * r2
        drdx, drdy = 2.0 * x * dr, 2.0 * y * dr
        return np.array([
            [radial + x * drdx + 2.0 * self.p1 * y + 6.0 * self.p2 * x,
             x * drdy + 2.0 * self.p1 * x + 2.0 * self.p2 * y],
            [y * drdx + 2.0 * self.p1 * x + 2.0 * self.p2 * y,
             radial + y * drdy + 6.0 * self.p1 * y + 2.0 * self.p2 * x],
        ])

    def undistort(self, xd):
        """Fixed-point inversion of the distortion; returns (points, converged mask)."""
        x = xd.copy()
        converged = np.zeros(len(xd), dtype=bool)
        for _ in range(self.max_iterations):
            r2 = np.sum(x * x, axis=1)
            radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2
            dx = 2.0 * self.p1 * x[:, 0] * x[:, 1] + self.p2 * (r2 + 2.0 * x[:, 0] ** 2)
            dy = self.p1 * (r2 + 2.0 * x[:, 1] ** 2) + 2.0 * self.p2 * x[:, 0] * x[:, 1]
            new = np.column_stack([(xd[:, 0] - dx) / radial, (xd[:, 1] - dy) / radial])
            converged = np.max(np.abs(new - x), axis=1) < self.tolerance
            x = new
            if converged.all():
                break
        ok = converged & np.all(np.isfinite(x), axis=1)
        return x, ok

    def project(self, points) -> np.ndarray:
        P = np.atleast_2d(np.asarray(points, dtype=float))
        xn = P[:, :2] / P[:, 2:3]
        return self._to_pixels(self.distort(xn))

    def project_jacobian(self, point) -> np.ndarray:
        P = np.asarray(point, dtype=float)
        xn = P[:2] / P[2]
        return np.diag([self.fx, self.fy]) @ self.distort_jacobian(xn) @ _perspective_jacobian(P)

    def unproject(self, pixels):
        xn, ok = self.undistort(self._to_metric(pixels))
        b = np.column_stack([xn, np.ones(len(xn))])
        b /= np.linalg.norm(b, axis=1, keepdims=True)
        return b, ok


@dataclass
class KannalaBrandt(CameraModel):
    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    k4: float = 0.0
    max_iterations: int = 10
    tolerance: float = 1e-12

    def _theta_d(self, theta):
        t2 = theta * theta
        return theta * (1.0 + t2 * (self.k1 + t2 * (self.k2 + t2 * (self.k3 + t2 * self.k4))))

    def _theta_d_prime(self, theta):
        t2 = theta * theta
        return 1.0 + t2 * (3 * self.k1 + t2 * (5 * self.k2 + t2 * (7 * self.k3 + t2 * 9 * self.k4)))

    def project(self, points) -> np.ndarray:
        P = np.atleast_2d(np.asarray(points, dtype=float))
        r = np.hypot(P[:, 0], P[:, 1])
        theta = np.arctan2(r, P[:, 2])
        td = self._theta_d(theta)
        safe_r = np.where(r > 1e-15, r, 1.0)
        scale = np.where(r > 1e-15, td / safe_r, 1.0 / np.maximum(P[:, 2], 1e-300))
        return self._to_pixels(P[:, :2] * scale[:, None])

    def project_jacobian(self, point) -> np.ndarray:
        X, Y, Z = np.asarray(point, dtype=float)
        r2 = X * X + Y * Y
        r = np.sqrt(r2)
        rho2 = r2 + Z * Z
        if r < 1e-12:
            return np.diag([self.fx, self.fy]) @ _perspective_jacobian(np.array([X, Y, Z]))
        theta = np.arctan2(r, Z)
        td = self._theta_d(theta)
        tdp = self._theta_d_prime(theta)
        dtheta = np.array([Z * X / (r * rho2), Z * Y / (r * rho2), -r / rho2])
        dr = np.array([X / r, Y / r, 0.0])
        da = (tdp * dtheta * r - td * dr) / r2  # gradient of td / r
        a = td / r
        J = np.array([[a, 0.0, 0.0], [0.0, a, 0.0]]) + np.outer([X, Y], da)
        return np.diag([self.fx, self.fy]) @ J

    def unproject(self, pixels):
        m = self._to_metric(pixels)
        rd = np.hypot(m[:, 0], m[:, 1])
        theta = rd.copy()
        ok = np.zeros(len(rd), dtype=bool)
        for _ in range(self.max_iterations):
            step = (self._theta_d(theta) - rd) / self._theta_d_prime(theta)
            theta = theta - step
            ok = np.abs(step) < self.tolerance
            if ok.all():
                break
        ok = ok | (np.abs(self._theta_d(theta) - rd) < 1e-10)
        ok &= np.isfinite(theta) & (theta >= 0.0) & (theta < np.pi)
        safe_rd = np.where(rd > 1e-15, rd, 1.0)
        s = np.where(rd > 1e-15, np.sin(theta) / safe_rd, 1.0)
        b = np.column_stack([m * s[:, None], np.cos(theta)])
        b /= np.linalg.norm(b, axis=1, keepdims=True)
        return b, ok


def make_camera(model: str, intrinsics, distortion=(), resolution=(752, 480)) -> CameraModel:
    fx, fy, cx, cy = (float(v) for v in intrinsics)
    w, h = (int(v) for v in resolution)
    coeffs = [float(c) for c in distortion]
    if model in ("pinhole-radtan", "pinhole", "radtan"):
        coeffs = (coeffs + [0.0] * 4)[:4]
        return PinholeRadTan(fx, fy, cx, cy, w, h, *coeffs)
    if model in ("kannala-brandt", "fisheye", "equidistant"):
        coeffs = (coeffs + [0.0] * 4)[:4]
        return KannalaBrandt(fx, fy, cx, cy, w, h, *coeffs)
    raise ValueError(f"unknown camera model {model!r}")


@dataclass
class CameraRig:
    """Cameras plus their camera-to-IMU transforms (index 0 is the left camera)."""

    cameras: list
    imu_from_camera: list = field(default_factory=list)

    def __post_init__(self):
        if not self.imu_from_camera:
            self.imu_from_camera = [RigidTransform.identity() for _ in self.cameras]
        if len(self.cameras) != len(self.imu_from_camera):
            raise ValueError("one extrinsic transform per camera is required")
        if len(self.cameras) not in (1, 2):
            raise ValueError("rig must have one or two cameras")

    @property
    def stereo(self) -> bool:
        return len(self.cameras) == 2

    def right_from_left(self) -> RigidTransform:
        """Transform taking left-camera coordinates to right-camera coordinates."""
        return self.imu_from_camera[1].inverse() @ self.imu_from_camera[0]

    def essential_matrix(self) -> np.ndarray:
        # y_R^T E y_L = 0 for homogeneous normalized coordinates
        T = self.right_from_left()
        return skew(T.translation) @ T.rotation

    def epipolar_residuals(self, left_norm, right_norm) -> np.ndarray:
        """Distance of each right point from the epipolar line of its left match.

        Measured in normalized image units: |y_R^T E y_L| / |(E y_L)_xy|.
        """
        E = self.essential_matrix()
        left_norm = np.atleast_2d(left_norm)
        right_norm = np.atleast_2d(right_norm)
        yl = np.column_stack([left_norm, np.ones(len(left_norm))])
        yr = np.column_stack([right_norm, np.ones(len(right_norm))])
        lines = yl @ E.T
        return np.abs(np.sum(yr * lines, axis=1)) / np.maximum(
            np.hypot(lines[:, 0], lines[:, 1]), 1e-12)
