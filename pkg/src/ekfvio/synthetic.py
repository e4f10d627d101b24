"""Analytic synthetic sequences: exact IMU readings, projected feature tracks, ground truth.

The body follows a planar curve ``c(phi)`` at a smoothly varying parameter speed,
heading along the tangent, with small roll/pitch/height oscillations that are
functions of ``phi`` (so everything freezes when the motion stops).
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .camera import CameraRig, PinholeRadTan
from .dataset import FrameObservations, Sequence
from .filter import ImuSample, ou_increment_variance
from .geometry import RigidTransform, rotate_x, rotate_y, rotate_z
from .trajectory import Trajectory

log = logging.getLogger(__name__)

GRAVITY = 9.81


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x ** 3 * (10.0 + x * (-15.0 + 6.0 * x))


def _smoothstep_d(x):
    inside = (x > 0.0) & (x < 1.0)
    return np.where(inside, 30.0 * x ** 2 * (1.0 - x) ** 2, 0.0)


def _smoothstep_int(x):
    # integral of the smoothstep from 0 to x (x in [0, 1])
    x = np.clip(x, 0.0, 1.0)
    return x ** 4 * (2.5 + x * (-3.0 + x))


@dataclass
class SpeedProfile:
    """Piecewise parameter speed: segments ``(duration, start_rate, end_rate)`` joined by smoothsteps."""

    segments: list

    def evaluate(self, t):
        t = np.asarray(t, dtype=float)
        phi = np.zeros_like(t)
        rate = np.zeros_like(t)
        accel = np.zeros_like(t)
        t0, phi0 = 0.0, 0.0
        done = np.zeros(t.shape, dtype=bool)
        for k, (dur, a, b) in enumerate(self.segments):
            last = k == len(self.segments) - 1
            sel = (~done) & ((t < t0 + dur) | last)
            x = (t[sel] - t0) / dur
            xc = np.clip(x, 0.0, 1.0)
            over = np.maximum(t[sel] - (t0 + dur), 0.0)
            phi[sel] = phi0 + dur * (a * xc + (b - a) * _smoothstep_int(xc)) + b * over
            rate[sel] = a + (b - a) * _smoothstep(x)
            accel[sel] = (b - a) * _smoothstep_d(x) / dur
            done |= sel
            phi0 += dur * (a + 0.5 * (b - a))
            t0 += dur
        return phi, rate, accel


# curves: value, first and second derivative w.r.t. phi (planar, z = 0)

def _figure_eight(phi, A):
    s, c = np.sin(phi), np.cos(phi)
    s2, c2 = np.sin(2 * phi), np.cos(2 * phi)
    p = np.stack([A * c, 0.5 * A * s2], axis=-1)
    d1 = np.stack([-A * s, A * c2], axis=-1)
    d2 = np.stack([-A * c, -2.0 * A * s2], axis=-1)
    return p, d1, d2


def _rounded_square(phi, A, k=0.1):
    p = np.stack([A * (np.cos(phi) + k * np.cos(3 * phi)), A * (np.sin(phi) - k * np.sin(3 * phi))], -1)
    d1 = np.stack([A * (-np.sin(phi) - 3 * k * np.sin(3 * phi)),
                   A * (np.cos(phi) - 3 * k * np.cos(3 * phi))], -1)
    d2 = np.stack([A * (-np.cos(phi) - 9 * k * np.cos(3 * phi)),
                   A * (-np.sin(phi) + 9 * k * np.sin(3 * phi))], -1)
    return p, d1, d2


def _circle(phi, A):
    c, s = np.cos(phi), np.sin(phi)
    return (np.stack([A * c, A * s], -1), np.stack([-A * s, A * c], -1),
            np.stack([-A * c, -A * s], -1))


def _line(phi, A):
    z = np.zeros_like(phi)
    return np.stack([A * phi, z], -1), np.stack([A + z, z], -1), np.stack([z, z], -1)


_CURVES = {"figure8": _figure_eight, "square": _rounded_square, "circle": _circle, "line": _line}


@dataclass
class SyntheticScene:
    """Scene description: trajectory, landmarks and noise switches."""

    trajectory: str = "figure8"        # figure8 | square | circle | line | static
    duration: float = 60.0
    size: float = 3.0                   # curve scale A, meters
    period: float = 20.0                # seconds per 2*pi of phi at cruise speed
    rest_start: float = 1.0
    ramp: float = 2.0
    still_end: float = 0.0              # ramp down and hold still for this long at the end
    heading_offset: float = 0.0
    roll_amplitude: float = np.radians(4.0)
    pitch_amplitude: float = np.radians(3.0)
    height_amplitude: float = 0.15
    n_landmarks: int = 200
    landmark_radius: float = 8.0
    landmark_height: tuple = (-1.5, 2.5)
    stereo: bool = True
    baseline: float = 0.11
    intrinsics: tuple = (458.0, 458.0, 376.0, 240.0)
    resolution: tuple = (752, 480)
    imu_noise: bool = False
    acc_noise: float = 2.0e-3
    gyro_noise: float = 1.7e-4
    bias: bool = False
    acc_bias_sigma: float = 3.0e-3
    gyro_bias_sigma: float = 2.0e-5
    bias_alpha: float = 1e-3
    gyro_bias_offset: tuple = (0.0, 0.0, 0.0)   # constant, unmodelled drift injection
    pixel_noise: float = 0.0
    outlier_rate: float = 0.0
    outlier_range: tuple = (10.0, 30.0)
    rate_imu: float = 200.0
    rate_cam: float = 20.0
    seed: int = 0

    def profile(self) -> SpeedProfile:
        if self.trajectory == "static":
            return SpeedProfile([(self.duration, 0.0, 0.0)])
        w = 2.0 * np.pi / self.period
        segs = [(self.rest_start, 0.0, 0.0), (self.ramp, 0.0, w)]
        cruise = self.duration - self.rest_start - self.ramp
        if self.still_end > 0:
            cruise -= self.ramp + self.still_end
        if cruise <= 0:
            raise ValueError("scene too short for its rest/ramp segments")
        segs.append((cruise, w, w))
        if self.still_end > 0:
            segs += [(self.ramp, w, 0.0), (self.still_end, 0.0, 0.0)]
        return SpeedProfile(segs)


@dataclass
class BodyMotion:
    times: np.ndarray
    positions: np.ndarray
    rotations: np.ndarray      # body-to-world
    gyro: np.ndarray           # body angular rate
    specific_force: np.ndarray  # body frame


def body_motion(scene: SyntheticScene, times) -> BodyMotion:
    """Exact pose, angular velocity and specific force at ``times``."""
    times = np.asarray(times, dtype=float)
    phi, pd, pdd = scene.profile().evaluate(times)
    curve = _CURVES.get(scene.trajectory, _line)
    c, c1, c2 = curve(phi, scene.size)
    if scene.trajectory == "static":
        c = np.zeros_like(c)
    # planar acceleration and tangent heading
    pos_xy = c
    acc_xy = c2 * pd[:, None] ** 2 + c1 * pdd[:, None]
    psi = np.arctan2(c1[:, 1], c1[:, 0]) + scene.heading_offset
    n2 = np.sum(c1 * c1, axis=1)
    dpsi_dphi = (c1[:, 0] * c2[:, 1] - c1[:, 1] * c2[:, 0]) / n2
    # oscillations as functions of phi: (value, d/dphi, d2/dphi2)
    def osc(amp, k, shift=0.0):
        arg = k * phi + shift
        return amp * np.sin(arg), amp * k * np.cos(arg), -amp * k * k * np.sin(arg)
    roll, droll, _ = osc(scene.roll_amplitude, 2.0)
    pitch, dpitch, _ = osc(scene.pitch_amplitude, 3.0, 0.5)
    z, dz, ddz = osc(scene.height_amplitude, 2.0, 1.0)
    if scene.trajectory == "static":
        roll, pitch, z = roll * 0, pitch * 0, z * 0
        droll, dpitch, dz, ddz = droll * 0, dpitch * 0, dz * 0, ddz * 0
    positions = np.column_stack([pos_xy, z])
    acc = np.column_stack([acc_xy, ddz * pd ** 2 + dz * pdd])
    rates = np.column_stack([droll, dpitch, dpsi_dphi]) * pd[:, None]   # Euler angle rates
    n = len(times)
    R = np.empty((n, 3, 3))
    omega = np.empty((n, 3))
    f = np.empty((n, 3))
    ez, ey, ex = np.eye(3)[2], np.eye(3)[1], np.eye(3)[0]
    for k in range(n):
        Rx, Ry, Rz = rotate_x(roll[k]), rotate_y(pitch[k]), rotate_z(psi[k])
        R[k] = Rz @ Ry @ Rx
        omega[k] = (Rx.T @ Ry.T @ ez * rates[k, 2] + Rx.T @ ey * rates[k, 1] + ex * rates[k, 0])
        f[k] = R[k].T @ (acc[k] + np.array([0.0, 0.0, GRAVITY]))
    return BodyMotion(times, positions, R, omega, f)


def default_rig(scene: SyntheticScene) -> CameraRig:
    fx, fy, cx, cy = scene.intrinsics
    w, h = scene.resolution
    cam = PinholeRadTan(fx, fy, cx, cy, w, h)
    # camera z = body x, camera x = -body y, camera y = -body z
    Rc = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
    left = RigidTransform(Rc, [0.05, 0.0, 0.0])
    if not scene.stereo:
        return CameraRig([cam], [left])
    right = RigidTransform(Rc, left.translation + Rc @ np.array([scene.baseline, 0.0, 0.0]))
    return CameraRig([cam, PinholeRadTan(fx, fy, cx, cy, w, h)], [left, right])


def make_landmarks(scene: SyntheticScene, rng) -> np.ndarray:
    n = scene.n_landmarks
    ang = rng.uniform(0.0, 2.0 * np.pi, n)
    zlo, zhi = scene.landmark_height
    r = scene.landmark_radius * rng.uniform(0.9, 1.1, n)
    return np.column_stack([r * np.cos(ang), r * np.sin(ang), rng.uniform(zlo, zhi, n)])


def _project_all(rig: CameraRig, cam_idx: int, R_wb, p, landmarks, min_depth=0.2):
    ext = rig.imu_from_camera[cam_idx]
    cam = rig.cameras[cam_idx]
    x_imu = (landmarks - p) @ R_wb             # R_wb^T (L - p), row-wise
    xc = (x_imu - ext.translation) @ ext.rotation
    front = xc[:, 2] > min_depth
    px = np.full((len(landmarks), 2), np.nan)
    if front.any():
        px[front] = cam.project(xc[front])
    visible = front & cam.in_image(np.nan_to_num(px, nan=-1e9), margin=2.0)
    return px, visible


@dataclass
class SyntheticData:
    sequence: Sequence
    landmarks: np.ndarray
    truth_frames: Trajectory          # ground truth at camera timestamps
    scene: SyntheticScene
    outlier_mask: list = field(default_factory=list)   # per frame: bool array aligned with ids
    track_landmark: Optional[np.ndarray] = None         # track id -> landmark index


def generate_synthetic(scene: SyntheticScene, rate_imu: Optional[float] = None,
                       rate_cam: Optional[float] = None, seed: Optional[int] = None) -> SyntheticData:
    rate_imu = scene.rate_imu if rate_imu is None else rate_imu
    rate_cam = scene.rate_cam if rate_cam is None else rate_cam
    seed = scene.seed if seed is None else seed
    if rate_imu <= 0 or rate_cam <= 0:
        raise ValueError("rates must be positive")
    rng = np.random.default_rng(seed)
    landmarks = make_landmarks(scene, np.random.default_rng(seed + 7919))
    rig = default_rig(scene)

    n_imu = int(round(scene.duration * rate_imu)) + 1
    t_imu = np.arange(n_imu) / rate_imu
    motion = body_motion(scene, t_imu)
    dt = 1.0 / rate_imu
    gyro = motion.gyro + np.asarray(scene.gyro_bias_offset, dtype=float)
    accel = motion.specific_force.copy()
    if scene.bias:
        ba = np.zeros(3)
        bw = np.zeros(3)
        decay = np.exp(-scene.bias_alpha * dt)
        sa = np.sqrt(ou_increment_variance(scene.acc_bias_sigma, scene.bias_alpha, dt))
        sw = np.sqrt(ou_increment_variance(scene.gyro_bias_sigma, scene.bias_alpha, dt))
        for k in range(n_imu):
            accel[k] += ba
            gyro[k] += bw
            ba = decay * ba + sa * rng.standard_normal(3)
            bw = decay * bw + sw * rng.standard_normal(3)
    if scene.imu_noise:
        accel += scene.acc_noise / np.sqrt(dt) * rng.standard_normal(accel.shape)
        gyro += scene.gyro_noise / np.sqrt(dt) * rng.standard_normal(gyro.shape)

    n_cam = int(np.floor(scene.duration * rate_cam)) + 1
    t_cam = np.arange(n_cam) / rate_cam
    cam_motion = body_motion(scene, t_cam)
    n_lm = len(landmarks)
    track_of = np.full(n_lm, -1)
    next_id = 0
    owner = []
    frames = []
    outliers = []
    ever_visible = np.zeros(n_lm, dtype=bool)
    for k in range(n_cam):
        R_wb, p = cam_motion.rotations[k], cam_motion.positions[k]
        left, vis = _project_all(rig, 0, R_wb, p, landmarks)
        right = None
        if rig.stereo:
            right, vis_r = _project_all(rig, 1, R_wb, p, landmarks)
            vis &= vis_r
        ever_visible |= vis
        # a landmark that drops out and reappears starts a new track
        for j in np.flatnonzero(~vis):
            track_of[j] = -1
        for j in np.flatnonzero(vis & (track_of < 0)):
            track_of[j] = next_id
            owner.append(j)
            next_id += 1
        idx = np.flatnonzero(vis)
        lp = left[idx].copy()
        rp = right[idx].copy() if right is not None else None
        if scene.pixel_noise > 0:
            lp += scene.pixel_noise * rng.standard_normal(lp.shape)
            if rp is not None:
                rp += scene.pixel_noise * rng.standard_normal(rp.shape)
        out = np.zeros(len(idx), dtype=bool)
        if scene.outlier_rate > 0 and len(idx):
            out = rng.random(len(idx)) < scene.outlier_rate
            m = int(out.sum())
            if m:
                ang = rng.uniform(0, 2 * np.pi, m)
                mag = rng.uniform(*scene.outlier_range, m)
                shift = np.column_stack([np.cos(ang), np.sin(ang)]) * mag[:, None]
                lp[out] += shift
                if rp is not None:
                    rp[out] += shift
        frames.append(FrameObservations(k, track_of[idx].copy(), lp, rp))
        outliers.append(out)
    hidden = int((~ever_visible).sum())
    if hidden:
        log.warning("%d landmarks never visible; excluded from tracks", hidden)

    imu = [ImuSample(float(t), gyro[k], accel[k]) for k, t in enumerate(t_imu)]
    gt = Trajectory.from_poses(t_imu, [RigidTransform(R, p) for R, p in
                                       zip(motion.rotations, motion.positions)])
    gt_frames = Trajectory.from_poses(t_cam, [RigidTransform(R, p) for R, p in
                                              zip(cam_motion.rotations, cam_motion.positions)])
    seq = Sequence(imu=imu, frame_times=t_cam, rig=rig, tracks=frames, ground_truth=gt)
    return SyntheticData(seq, landmarks, gt_frames, scene, outliers, np.array(owner, dtype=int))


def scene_from_dict(table: dict) -> SyntheticScene:
    """Build a scene from a ``[scene]`` table; tuples may be given as lists."""
    names = {f.name: f for f in dataclasses.fields(SyntheticScene)}
    kw = {}
    for key, val in table.items():
        if key not in names:
            raise ValueError(f"unknown scene key {key!r}")
        default = getattr(SyntheticScene, key, None)
        if isinstance(default, tuple) or isinstance(val, list):
            val = tuple(val)
        elif isinstance(default, bool):
            val = bool(val)
        elif isinstance(default, float):
            val = float(val)
        kw[key] = val
    return SyntheticScene(**kw)


def load_scene(path):
    """Read a scene TOML file; returns ``(scene, document)``.

    Besides ``[scene]`` the document may carry ``[imu]``, ``[preset]`` and
    ``[overrides]`` tables with the same meaning as in a calibration file.
    """
    try:
        import tomllib
    except ModuleNotFoundError:  # pragma: no cover
        import tomli as tomllib
    from pathlib import Path

    doc = tomllib.loads(Path(path).read_text())
    if "scene" not in doc:
        raise ValueError(f"{path}: missing [scene] table")
    return scene_from_dict(doc["scene"]), doc
