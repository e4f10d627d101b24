"""Loosely coupled keyframe SLAM on top of the VIO output.

The map is a set of keyframes (left-camera poses with key points) and map points.
Key points are associated with map points through their VIO track ids and, for
points that are seen again after their tracks ended, by reprojection matching.
Every N-th VIO frame a task refines the map with a local bundle adjustment that
also keeps the keyframe chain close to the VIO relative motion, and returns a
rigid VIO-to-map transform that the pipeline applies to its output poses.
"""
from __future__ import annotations

import copy
import logging
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.spatial.transform import Rotation, Slerp

from .geometry import RigidTransform, rotate_z, skew, so3_exp, so3_log
from .trajectory import Trajectory

log = logging.getLogger(__name__)

# VIO relative-pose penalty: standard deviations accumulated per second
PENALTY_POS_STD = 0.01       # m / sqrt(s)
PENALTY_ROT_STD = 0.0035     # rad / sqrt(s)
MIN_PARALLAX_DEG = 1.0
MIN_DEPTH = 0.05


@dataclass
class KeyFrame:
    id: int
    timestamp: float
    pose: RigidTransform              # left camera -> map
    track_ids: np.ndarray
    pixels: np.ndarray
    normalized: np.ndarray
    point_ids: np.ndarray             # -1 where the key point has no map point
    frame_index: int = -1
    vio_pose: Optional[RigidTransform] = None    # the VIO input pose of this keyframe

    def __post_init__(self):
        self.track_ids = np.asarray(self.track_ids, dtype=int).reshape(-1)
        self.pixels = np.asarray(self.pixels, dtype=float).reshape(-1, 2)
        self.normalized = np.asarray(self.normalized, dtype=float).reshape(-1, 2)
        self.point_ids = np.asarray(self.point_ids, dtype=int).reshape(-1)
        if len(np.unique(self.track_ids)) != len(self.track_ids):
            raise ValueError("key point track ids must be unique within a keyframe")

    @property
    def center(self) -> np.ndarray:
        return self.pose.translation

    def __len__(self) -> int:
        return len(self.track_ids)


@dataclass
class MapPoint:
    id: int
    position: np.ndarray
    observations: dict = field(default_factory=dict)    # keyframe id -> key point index
    track_id: int = -1
    direction: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    d_min: float = 0.0
    d_max: float = np.inf

    def update_geometry(self, keyframes: dict) -> None:
        """Mean viewing direction and the distance range the point can be matched in."""
        rays = [self.position - keyframes[k].center for k in self.observations if k in keyframes]
        if not rays:
            return
        rays = np.array(rays)
        dist = np.linalg.norm(rays, axis=1)
        mean = (rays / np.maximum(dist[:, None], 1e-12)).mean(axis=0)
        self.direction = mean / max(np.linalg.norm(mean), 1e-12)
        self.d_min, self.d_max = 0.5 * dist.min(), 2.0 * dist.max()


@dataclass
class SlamTransforms:
    slam: RigidTransform = field(default_factory=RigidTransform.identity)
    prev: RigidTransform = field(default_factory=RigidTransform.identity)
    vio_to_slam: RigidTransform = field(default_factory=RigidTransform.identity)


class SlamMap:
    def __init__(self):
        self.keyframes: dict = {}
        self.points: dict = {}
        self.track_to_point: dict = {}
        self.next_keyframe = 0
        self.next_point = 0

    def ordered(self) -> list:
        return sorted(self.keyframes.values(), key=lambda kf: kf.timestamp)

    def last_keyframe(self) -> Optional[KeyFrame]:
        return max(self.keyframes.values(), key=lambda kf: kf.timestamp, default=None)

    def nearest_keyframes(self, center, n: int) -> list:
        kfs = list(self.keyframes.values())
        d = [np.linalg.norm(kf.center - center) for kf in kfs]
        return [kfs[i] for i in np.argsort(d, kind="stable")[:n]]

    def insert_keyframe(self, kf: KeyFrame) -> KeyFrame:
        kf.id = self.next_keyframe
        self.next_keyframe += 1
        self.keyframes[kf.id] = kf
        for idx, pid in enumerate(kf.point_ids):
            if pid >= 0:
                self.points[pid].observations[kf.id] = idx
        return kf

    def add_point(self, position, observations: dict, track_id: int = -1) -> MapPoint:
        mp = MapPoint(self.next_point, np.asarray(position, dtype=float), dict(observations), track_id)
        self.next_point += 1
        self.points[mp.id] = mp
        for kid, idx in observations.items():
            self.keyframes[kid].point_ids[idx] = mp.id
        if track_id >= 0:
            self.track_to_point[track_id] = mp.id
        mp.update_geometry(self.keyframes)
        return mp

    def remove_observation(self, pid: int, kid: int) -> None:
        mp = self.points[pid]
        idx = mp.observations.pop(kid, None)
        if idx is not None and kid in self.keyframes:
            self.keyframes[kid].point_ids[idx] = -1

    def remove_point(self, pid: int) -> None:
        mp = self.points.pop(pid)
        for kid, idx in mp.observations.items():
            if kid in self.keyframes:
                self.keyframes[kid].point_ids[idx] = -1
        for t in [t for t, p in self.track_to_point.items() if p == pid]:
            del self.track_to_point[t]

    def remove_keyframe(self, kid: int) -> None:
        kf = self.keyframes.pop(kid)
        for pid in kf.point_ids[kf.point_ids >= 0]:
            self.points[pid].observations.pop(kid, None)

    def merge_points(self, keep: int, drop: int) -> None:
        """Move the observations of ``drop`` into ``keep`` and delete ``drop``."""
        a, b = self.points[keep], self.points.pop(drop)
        for kid, idx in b.observations.items():
            kf = self.keyframes.get(kid)
            if kf is None:
                continue
            if kid in a.observations:
                kf.point_ids[idx] = -1
            else:
                a.observations[kid] = idx
                kf.point_ids[idx] = keep
        for t, p in list(self.track_to_point.items()):
            if p == drop:
                self.track_to_point[t] = keep
        a.update_geometry(self.keyframes)

    def copy(self) -> "SlamMap":
        return copy.deepcopy(self)

    def check(self) -> None:
        """Raise AssertionError when the two-way observation links disagree."""
        for pid, mp in self.points.items():
            for kid, idx in mp.observations.items():
                assert self.keyframes[kid].point_ids[idx] == pid, (pid, kid, idx)
        for kid, kf in self.keyframes.items():
            for idx, pid in enumerate(kf.point_ids):
                if pid >= 0:
                    assert self.points[pid].observations.get(kid) == idx, (pid, kid, idx)

    def dump(self, path) -> None:
        """Plain-text keyframe table followed by the map-point table."""
        lines = ["# keyframe id timestamp r11 r12 r13 tx r21 r22 r23 ty r31 r32 r33 tz"]
        for kf in self.ordered():
            T = kf.pose.as_matrix()[:3]
            lines.append(f"K {kf.id} {kf.timestamp:.9f} " + " ".join(f"{v:.9g}" for v in T.ravel()))
        lines.append("# point id x y z n_observations")
        for pid in sorted(self.points):
            mp = self.points[pid]
            lines.append(f"P {pid} " + " ".join(f"{v:.9g}" for v in mp.position)
                         + f" {len(mp.observations)}")
        Path(path).write_text("\n".join(lines) + "\n")


def read_map_dump(path):
    """Parse :meth:`SlamMap.dump` output into ``(keyframes, points)`` arrays."""
    kfs, pts = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "K":
            kfs.append([float(v) for v in parts[1:]])
        elif parts[0] == "P":
            pts.append([float(v) for v in parts[1:]])
    return np.array(kfs).reshape(-1, 14), np.array(pts).reshape(-1, 5)


# --- small geometric pieces ---------------------------------------------------------

def match_gravity_dir(T: RigidTransform, T_in: RigidTransform) -> RigidTransform:
    """``rotate_z(theta) @ T_in.rotation`` with the yaw closest to ``T``; translation of ``T``."""
    M = T_in.rotation @ T.rotation.T
    # trace(Rz(theta) M) is maximized in closed form
    theta = np.arctan2(M[0, 1] - M[1, 0], M[0, 0] + M[1, 1])
    return RigidTransform(rotate_z(theta) @ T_in.rotation, T.translation)


def keyframe_decision(candidate: KeyFrame, smap: SlamMap, distance: float = 0.15,
                      covisibility: float = 0.70) -> bool:
    last = smap.last_keyframe()
    if last is None:
        return True
    if np.linalg.norm(candidate.center - last.center) > distance:
        return True
    if len(candidate) == 0:
        return True
    shared = np.isin(candidate.track_ids, last.track_ids).mean()
    return bool(shared < covisibility)


def project(pose: RigidTransform, points: np.ndarray):
    """Normalized image coordinates and depths of world points in a camera-to-world pose."""
    Xc = (np.atleast_2d(points) - pose.translation) @ pose.rotation
    z = Xc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = Xc[:, :2] / z[:, None]
    return uv, z


def triangulate_linear(poses, normalized) -> np.ndarray:
    """DLT triangulation from camera-to-world poses and normalized coordinates."""
    rows = []
    for T, y in zip(poses, normalized):
        Rcw = T.rotation.T
        P = np.hstack([Rcw, (-Rcw @ T.translation)[:, None]])
        rows.append(y[0] * P[2] - P[0])
        rows.append(y[1] * P[2] - P[1])
    A = np.array(rows)
    _, _, Vt = np.linalg.svd(A)
    X = Vt[-1]
    if abs(X[3]) < 1e-12:
        return np.full(3, np.nan)
    return X[:3] / X[3]


def _max_parallax_cos(centers, X) -> float:
    rays = X - np.asarray(centers)
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    c = rays @ rays.T
    return float(c.min())


# --- Algorithm steps --------------------------------------------------------------

def match_by_reprojection(smap: SlamMap, kf: KeyFrame, local: list, focal: float,
                          gate_px: float) -> int:
    """Attach existing map points of the local keyframes to free key points of ``kf``."""
    own = set(kf.point_ids[kf.point_ids >= 0].tolist())
    cand = sorted({pid for other in local for pid in other.point_ids[other.point_ids >= 0]}
                  - own)
    free = np.flatnonzero(kf.point_ids < 0)
    if not cand or not len(free):
        return 0
    P = np.array([smap.points[p].position for p in cand])
    uv, z = project(kf.pose, P)
    ray = P - kf.center
    dist = np.linalg.norm(ray, axis=1)
    dirs = np.array([smap.points[p].direction for p in cand])
    lo = np.array([smap.points[p].d_min for p in cand])
    hi = np.array([smap.points[p].d_max for p in cand])
    ok = (z > MIN_DEPTH) & (dist >= lo) & (dist <= hi) & \
        (np.sum(ray * dirs, axis=1) > 0.5 * dist)
    if not ok.any():
        return 0
    ci = np.flatnonzero(ok)
    d = focal * np.linalg.norm(uv[ci, None, :] - kf.normalized[free][None, :, :], axis=2)
    pairs = np.argwhere(d < gate_px)
    if not len(pairs):
        return 0
    order = np.argsort(d[pairs[:, 0], pairs[:, 1]], kind="stable")
    used_p, used_k, n = set(), set(), 0
    for a, b in pairs[order]:
        if a in used_p or b in used_k:
            continue
        used_p.add(a)
        used_k.add(b)
        pid, idx = cand[ci[a]], free[b]
        kf.point_ids[idx] = pid
        smap.points[pid].observations[kf.id] = idx
        smap.track_to_point.setdefault(int(kf.track_ids[idx]), pid)
        n += 1
    return n


def triangulate_new_points(smap: SlamMap, kf: KeyFrame, local: list, focal: float,
                           gate_px: float) -> int:
    """Create map points for tracks seen in ``kf`` and in earlier local keyframes."""
    others = [o for o in local if o.id != kf.id]
    lookup = []
    for o in others:
        lookup.append((o, {int(t): i for i, t in enumerate(o.track_ids) if o.point_ids[i] < 0}))
    cos_min = np.cos(np.radians(MIN_PARALLAX_DEG))
    n = 0
    for idx in np.flatnonzero(kf.point_ids < 0):
        tid = int(kf.track_ids[idx])
        if tid in smap.track_to_point:
            continue
        obs = {kf.id: idx}
        poses, ys = [kf.pose], [kf.normalized[idx]]
        for o, table in lookup:
            j = table.get(tid)
            if j is not None:
                obs[o.id] = j
                poses.append(o.pose)
                ys.append(o.normalized[j])
        if len(obs) < 2:
            continue
        X = triangulate_linear(poses, ys)
        if not np.all(np.isfinite(X)):
            continue
        if _max_parallax_cos([T.translation for T in poses], X) > cos_min:
            continue
        good = True
        for T, y in zip(poses, ys):
            uv, z = project(T, X)
            if z[0] < MIN_DEPTH or focal * np.linalg.norm(uv[0] - y) > gate_px:
                good = False
                break
        if good:
            smap.add_point(X, obs, tid)
            n += 1
    return n


def deduplicate(smap: SlamMap, kf: KeyFrame, local: list, focal: float, gate_px: float) -> int:
    """Fuse map points that project onto the same key point of ``kf`` and nearly coincide."""
    pids = [int(p) for p in np.unique(kf.point_ids[kf.point_ids >= 0])]
    if len(pids) < 2:
        return 0
    others = sorted({pid for o in local for pid in o.point_ids[o.point_ids >= 0]} - set(pids))
    if not others:
        return 0
    P = np.array([smap.points[p].position for p in others])
    uv, z = project(kf.pose, P)
    merged = 0
    for pid in pids:
        if pid not in smap.points:
            continue
        idx = smap.points[pid].observations[kf.id]
        y = kf.normalized[idx]
        X = smap.points[pid].position
        depth = np.linalg.norm(X - kf.center)
        close = np.flatnonzero((z > MIN_DEPTH) & (focal * np.linalg.norm(uv - y, axis=1) < 0.5 * gate_px))
        for c in close:
            other = others[c]
            if other not in smap.points:
                continue
            if np.linalg.norm(smap.points[other].position - X) > 0.05 * depth:
                continue
            a, b = smap.points[pid], smap.points[other]
            keep, drop = (other, pid) if len(b.observations) >= len(a.observations) else (pid, other)
            smap.merge_points(keep, drop)
            merged += 1
            break
    return merged


# --- local bundle adjustment ---------------------------------------------------------

@dataclass
class BaReport:
    initial_cost: float = 0.0
    final_cost: float = 0.0
    iterations: int = 0
    accepted: int = 0
    free_keyframes: int = 0
    fixed_keyframes: int = 0
    points: int = 0
    stalled: bool = False
    removed_observations: int = 0


def penalty_weights(dt: float, scale: float = 1.0):
    """Position / orientation weights of one VIO relative-pose penalty (inverse variances)."""
    dt = max(float(dt), 1e-3)
    return scale / (PENALTY_POS_STD ** 2 * dt), scale / (PENALTY_ROT_STD ** 2 * dt)


def _relative_error(Ta: RigidTransform, Tb: RigidTransform, meas: RigidTransform) -> np.ndarray:
    """Mismatch of the estimated ``Tb^-1 Ta`` against the VIO measurement."""
    E = meas.inverse() @ (Tb.inverse() @ Ta)
    return np.concatenate([E.translation, so3_log(E.rotation)])


def _perturb(T: RigidTransform, d: np.ndarray) -> RigidTransform:
    return RigidTransform(so3_exp(d[:3]) @ T.rotation, T.translation + d[3:6])


class _Problem:
    """Local BA problem: free poses, fixed poses, points and VIO penalties."""

    def __init__(self, smap: SlamMap, window: list, focal: float, sigma_px: float,
                 huber_sigma: float, penalty_scale: float):
        self.focal, self.sigma = focal, sigma_px
        self.k = huber_sigma
        pts = sorted({int(p) for kf in window for p in kf.point_ids[kf.point_ids >= 0]
                      if len(smap.points[p].observations) >= 2})
        free_ids = [kf.id for kf in window]
        fixed = sorted({kid for p in pts for kid in smap.points[p].observations} - set(free_ids))
        if not fixed and len(free_ids) > 1:
            oldest = min(window, key=lambda kf: kf.timestamp).id
            free_ids.remove(oldest)
            fixed = [oldest]
        self.free_ids, self.fixed_ids, self.point_ids = free_ids, fixed, pts
        self.cam_index = {kid: i for i, kid in enumerate(free_ids)}
        self.poses = {kid: smap.keyframes[kid].pose for kid in free_ids + fixed}
        self.X = np.array([smap.points[p].position for p in pts]).reshape(-1, 3)
        kf_rows, pt_rows, ys, obs_keys = [], [], [], []
        for j, p in enumerate(pts):
            for kid, idx in smap.points[p].observations.items():
                if kid in self.poses:
                    kf_rows.append(kid)
                    pt_rows.append(j)
                    ys.append(smap.keyframes[kid].normalized[idx])
                    obs_keys.append((p, kid))
        self.obs_kf = np.array(kf_rows, dtype=int)
        self.obs_pt = np.array(pt_rows, dtype=int)
        self.obs_y = np.array(ys).reshape(-1, 2)
        self.obs_keys = obs_keys
        # VIO penalties between consecutive keyframes touching a free one
        chain = smap.ordered()
        self.penalties = []
        for a, b in zip(chain, chain[1:]):
            if (a.id in self.cam_index or b.id in self.cam_index) and a.id in self.poses \
                    and b.id in self.poses and a.vio_pose is not None and b.vio_pose is not None:
                meas = b.vio_pose.inverse() @ a.vio_pose
                wp, wr = penalty_weights(b.timestamp - a.timestamp, penalty_scale)
                sw = np.sqrt(np.array([wp] * 3 + [wr] * 3))
                self.penalties.append((a.id, b.id, meas, sw))

    @property
    def n_cams(self) -> int:
        return len(self.free_ids)

    def reprojection(self, poses, X):
        if not len(self.obs_kf):
            return np.zeros((0, 2)), np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros((0, 3))
        R = np.stack([poses[k].rotation for k in self.obs_kf])
        t = np.stack([poses[k].translation for k in self.obs_kf])
        d = X[self.obs_pt] - t
        Xc = np.einsum("nji,nj->ni", R, d)
        z = Xc[:, 2]
        r = self.focal / self.sigma * (Xc[:, :2] / z[:, None] - self.obs_y)
        return r, Xc, R, d

    def _robust(self, r):
        e = np.linalg.norm(r, axis=1)
        k = self.k
        cost = np.where(e <= k, e ** 2, 2 * k * e - k ** 2)
        w = np.where(e <= k, 1.0, k / np.maximum(e, 1e-12))
        return cost, w

    def cost(self, poses, X) -> float:
        r, Xc, _, _ = self.reprojection(poses, X)
        if np.any(Xc[:, 2] <= 1e-6):
            return np.inf
        total = self._robust(r)[0].sum()
        for a, b, meas, sw in self.penalties:
            total += np.sum((sw * _relative_error(poses[a], poses[b], meas)) ** 2)
        return float(total)

    def normal_equations(self, poses, X):
        nc, npt = self.n_cams, len(X)
        r, Xc, R, d = self.reprojection(poses, X)
        _, w = self._robust(r)
        z = Xc[:, 2]
        s = self.focal / self.sigma
        dpi = np.zeros((len(r), 2, 3))
        dpi[:, 0, 0] = dpi[:, 1, 1] = s / z
        dpi[:, 0, 2] = -s * Xc[:, 0] / z ** 2
        dpi[:, 1, 2] = -s * Xc[:, 1] / z ** 2
        Rt = np.transpose(R, (0, 2, 1))
        Jp = dpi @ Rt                                     # d r / d X
        Jth = Jp @ np.stack([skew(v) for v in d])         # d r / d theta
        Jc = np.concatenate([Jth, -Jp], axis=2)           # (n, 2, 6)
        Wr = w[:, None] * r
        Hpp = np.einsum("n,nki,nkj->nij", w, Jp, Jp)
        gp = -np.einsum("nki,nk->ni", Jp, Wr)
        Hpp_pts = np.zeros((npt, 3, 3))
        np.add.at(Hpp_pts, self.obs_pt, Hpp)
        g_pts = np.zeros((npt, 3))
        np.add.at(g_pts, self.obs_pt, gp)
        Hcc = np.zeros((6 * nc, 6 * nc))
        gc = np.zeros(6 * nc)
        ci = np.array([self.cam_index.get(k, -1) for k in self.obs_kf], dtype=int)
        on = ci >= 0
        Hc_obs = np.einsum("n,nki,nkj->nij", w[on], Jc[on], Jc[on])
        Hcp_obs = np.einsum("n,nki,nkj->nij", w[on], Jc[on], Jp[on])
        g_obs = -np.einsum("nki,nk->ni", Jc[on], Wr[on])
        blocks = np.zeros((nc, 6, 6))
        np.add.at(blocks, ci[on], Hc_obs)
        gcb = np.zeros((nc, 6))
        np.add.at(gcb, ci[on], g_obs)
        for i in range(nc):
            Hcc[6 * i:6 * i + 6, 6 * i:6 * i + 6] = blocks[i]
        gc += gcb.ravel()
        # camera-point coupling as a sparse (6nc x 3np) matrix
        oc, op = ci[on], self.obs_pt[on]
        rows = (6 * oc[:, None, None] + np.arange(6)[None, :, None]) + 0 * np.arange(3)[None, None, :]
        cols = (3 * op[:, None, None] + np.arange(3)[None, None, :]) + 0 * np.arange(6)[None, :, None]
        Hcp = sp.csr_matrix((Hcp_obs.ravel(), (rows.ravel(), cols.ravel())), shape=(6 * nc, 3 * npt))
        # penalties, differentiated numerically over the 12 pose perturbations
        for a, b, meas, sw in self.penalties:
            J, e = self._penalty_jacobian(poses, a, b, meas, sw)
            for u, kid in ((0, a), (1, b)):
                i = self.cam_index.get(kid)
                if i is None:
                    continue
                Ju = J[:, 6 * u:6 * u + 6]
                gc[6 * i:6 * i + 6] -= Ju.T @ e
                for v, kid2 in ((0, a), (1, b)):
                    i2 = self.cam_index.get(kid2)
                    if i2 is None:
                        continue
                    Hcc[6 * i:6 * i + 6, 6 * i2:6 * i2 + 6] += Ju.T @ J[:, 6 * v:6 * v + 6]
        return Hcc, Hcp, Hpp_pts, gc, g_pts

    @staticmethod
    def _penalty_jacobian(poses, a, b, meas, sw, h: float = 1e-6):
        e0 = sw * _relative_error(poses[a], poses[b], meas)
        J = np.zeros((6, 12))
        for u, kid in ((0, a), (1, b)):
            for c in range(6):
                dv = np.zeros(6)
                dv[c] = h
                P1, P2 = dict(poses), dict(poses)
                P1[kid] = _perturb(poses[kid], dv)
                P2[kid] = _perturb(poses[kid], -dv)
                J[:, 6 * u + c] = sw * (_relative_error(P1[a], P1[b], meas)
                                         - _relative_error(P2[a], P2[b], meas)) / (2 * h)
        return J, e0

    def solve(self, Hcc, Hcp, Hpp, gc, gp, lam: float):
        nc, npt = self.n_cams, len(Hpp)
        Hpp_d = Hpp + lam * np.einsum("nii->ni", Hpp)[:, :, None] * np.eye(3) + 1e-9 * np.eye(3)
        Hpp_inv = np.linalg.inv(Hpp_d)
        if nc == 0:
            return np.zeros(0), np.einsum("nij,nj->ni", Hpp_inv, gp)
        inv_bd = sp.block_diag(list(Hpp_inv), format="csr") if npt else sp.csr_matrix((0, 0))
        Hcc_d = Hcc + lam * np.diag(np.diag(Hcc)) + 1e-9 * np.eye(6 * nc)
        if npt:
            HW = Hcp @ inv_bd
            S = Hcc_d - (HW @ Hcp.T).toarray()
            rhs = gc - HW @ gp.ravel()
        else:
            S, rhs = Hcc_d, gc
        dc = np.linalg.solve(S, rhs)
        if npt:
            dp = np.einsum("nij,nj->ni", Hpp_inv, gp - (Hcp.T @ dc).reshape(-1, 3))
        else:
            dp = np.zeros((0, 3))
        return dc, dp

    def apply(self, poses, X, dc, dp):
        out = dict(poses)
        for kid, i in self.cam_index.items():
            out[kid] = _perturb(poses[kid], dc[6 * i:6 * i + 6])
        return out, X + dp


def local_bundle_adjustment(smap: SlamMap, center: KeyFrame, n_ba: int, focal: float,
                            iterations: int = 10, huber_sigma: float = 2.5, sigma_px: float = 1.0,
                            penalty_scale: float = 1.0, outlier_px: Optional[float] = None,
                            max_retries: int = 10) -> BaReport:
    """Levenberg-Marquardt over the ``n_ba`` keyframes nearest to ``center`` and their points."""
    if n_ba < 1:
        raise ValueError("n_ba must be >= 1")
    window = smap.nearest_keyframes(center.center, n_ba)
    prob = _Problem(smap, window, focal, sigma_px, huber_sigma, penalty_scale)
    rep = BaReport(free_keyframes=prob.n_cams, fixed_keyframes=len(prob.fixed_ids),
                   points=len(prob.point_ids))
    poses, X = prob.poses, prob.X
    cost = prob.cost(poses, X)
    rep.initial_cost = rep.final_cost = cost
    if (not len(prob.obs_kf) and not prob.penalties) or not np.isfinite(cost):
        return rep
    lam = 1e-4
    for it in range(iterations):
        rep.iterations = it + 1
        if cost <= 1e-18:
            break
        Hcc, Hcp, Hpp, gc, gp = prob.normal_equations(poses, X)
        accepted = False
        for _ in range(max_retries):
            try:
                dc, dp = prob.solve(Hcc, Hcp, Hpp, gc, gp, lam)
            except np.linalg.LinAlgError:
                lam *= 10
                continue
            new_poses, new_X = prob.apply(poses, X, dc, dp)
            new_cost = prob.cost(new_poses, new_X)
            if new_cost < cost:
                accepted = True
                rel = (cost - new_cost) / max(cost, 1e-300)
                poses, X, cost = new_poses, new_X, new_cost
                lam = max(lam / 10, 1e-12)
                break
            lam *= 10
        if not accepted:
            rep.stalled = it == 0
            break
        rep.accepted += 1
        if rel < 1e-8:
            break
    rep.final_cost = cost
    for kid in prob.free_ids:
        smap.keyframes[kid].pose = poses[kid]
    for j, pid in enumerate(prob.point_ids):
        smap.points[pid].position = X[j]
    if outlier_px is not None and len(prob.obs_kf):
        r, Xc, _, _ = prob.reprojection(poses, X)
        bad = (np.linalg.norm(r, axis=1) * sigma_px > outlier_px) | (Xc[:, 2] <= MIN_DEPTH)
        for n in np.flatnonzero(bad):
            pid, kid = prob.obs_keys[n]
            if pid in smap.points:
                smap.remove_observation(pid, kid)
                rep.removed_observations += 1
    for pid in prob.point_ids:
        if pid in smap.points:
            smap.points[pid].update_geometry(smap.keyframes)
    return rep


def cull(smap: SlamMap, current: KeyFrame, window: list, redundancy: float = 0.9) -> tuple:
    """Drop redundant keyframes of the window and map points left with < 2 observations."""
    first = min(smap.keyframes.values(), key=lambda kf: kf.timestamp).id
    removed_kf = 0
    for kf in window:
        if kf.id in (current.id, first) or kf.id not in smap.keyframes:
            continue
        pids = kf.point_ids[kf.point_ids >= 0]
        if not len(pids):
            continue
        seen = sum(1 for p in pids if len(smap.points[p].observations) - 1 >= 3)
        if seen > redundancy * len(pids):
            smap.remove_keyframe(kf.id)
            removed_kf += 1
    removed_pts = 0
    for pid in [p for p, mp in smap.points.items() if len(mp.observations) < 2]:
        smap.remove_point(pid)
        removed_pts += 1
    return removed_kf, removed_pts


# --- task and driver -----------------------------------------------------------------

@dataclass
class SlamEvent:
    timestamp: float
    kind: str
    detail: str = ""


def slam_task(T_in: RigidTransform, keypoints, image, smap: SlamMap, transforms: SlamTransforms,
              params, focal: float, timestamp: float = 0.0, frame_index: int = -1,
              events: Optional[list] = None) -> RigidTransform:
    """One SLAM step; returns the VIO-to-map transform.

    ``keypoints`` holds ``(track_id, pixel, normalized)`` for the left camera frame
    whose pose is ``T_in``. ``image`` is accepted for interface symmetry; key points
    come from the VIO tracks only.
    """
    proposal = transforms.slam @ transforms.prev.inverse() @ T_in
    T_slam = match_gravity_dir(proposal, T_in)
    ids = np.array([int(k[0]) for k in keypoints], dtype=int)
    px = np.array([k[1] for k in keypoints], dtype=float).reshape(-1, 2)
    nrm = np.array([k[2] for k in keypoints], dtype=float).reshape(-1, 2)
    pids = np.array([smap.track_to_point.get(int(j), -1) for j in ids], dtype=int)
    kf = KeyFrame(-1, timestamp, T_slam, ids, px, nrm, pids, frame_index, T_in)
    if keyframe_decision(kf, smap, params.keyframe_distance, params.keyframe_covisibility):
        smap.insert_keyframe(kf)
        local = smap.nearest_keyframes(kf.center, params.n_matching)
        gate = params.match_gate_px
        matched = match_by_reprojection(smap, kf, local, focal, gate)
        created = triangulate_new_points(smap, kf, local, focal, gate)
        fused = deduplicate(smap, kf, local, focal, gate)
        pre = {k: smap.keyframes[k].pose for k in smap.keyframes}
        rep = local_bundle_adjustment(smap, kf, params.n_ba, focal, params.ba_iterations,
                                      params.ba_huber_sigma, 1.0, params.ba_penalty_scale,
                                      outlier_px=gate)
        if rep.final_cost > rep.initial_cost:
            for k, T in pre.items():
                smap.keyframes[k].pose = T
            if events is not None:
                events.append(SlamEvent(timestamp, "ba_diverged"))
        window = smap.nearest_keyframes(kf.center, params.n_ba)
        n_kf, n_pt = cull(smap, kf, window)
        if events is not None:
            events.append(SlamEvent(timestamp, "keyframe",
                                    f"id={kf.id} matched={matched} new={created} fused={fused} "
                                    f"ba={rep.initial_cost:.3g}->{rep.final_cost:.3g} "
                                    f"culled_kf={n_kf} culled_pts={n_pt}"))
        T_slam = match_gravity_dir(kf.pose, T_in)
    transforms.slam = T_slam
    transforms.prev = T_in
    return T_slam @ T_in.inverse()


class SlamSystem:
    """Owns the map and runs at most one SLAM task at a time.

    With ``params.slam_async`` the task runs on a worker thread; otherwise it runs
    at submission. Either way its result only becomes visible at the next
    :meth:`block`, so both modes give identical outputs.
    """

    def __init__(self, params, rig):
        self.params = params
        self.camera = rig.cameras[0]
        self.imu_from_camera = rig.imu_from_camera[0]
        self.focal = float(self.camera.mean_focal)
        self.map = SlamMap()
        self.transforms = SlamTransforms()
        self.events: list = []
        self._executor = ThreadPoolExecutor(max_workers=1) if params.slam_async else None
        self._future: Optional[Future] = None

    def _run(self, t_in, T_in, keypoints, frame_index, image):
        return slam_task(T_in, keypoints, image, self.map, self.transforms, self.params,
                         self.focal, t_in, frame_index, self.events)

    def submit(self, t_in: float, T_in: RigidTransform, keypoints, frame_index: int = -1,
               image=None) -> None:
        if self._future is not None:
            self.block()
        if self._executor is not None:
            self._future = self._executor.submit(self._run, t_in, T_in, keypoints, frame_index, image)
        else:
            fut: Future = Future()
            try:
                fut.set_result(self._run(t_in, T_in, keypoints, frame_index, image))
            except Exception as exc:   # surfaced at block() like the threaded path
                fut.set_exception(exc)
            self._future = fut

    def block(self) -> RigidTransform:
        if self._future is not None:
            fut, self._future = self._future, None
            self.transforms.vio_to_slam = fut.result()
        return self.transforms.vio_to_slam

    def keyframe_imu_poses(self) -> list:
        """``(timestamp, IMU-to-map pose)`` of every keyframe, oldest first."""
        back = self.imu_from_camera.inverse()
        return [(kf.timestamp, kf.pose @ back) for kf in self.map.ordered()]

    def snapshot(self) -> SlamMap:
        self.block()
        return self.map.copy()

    def close(self) -> None:
        self.block()
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None


def postprocess(keyframe_poses: list, online: Trajectory, time_tol: float = 1e-6) -> Trajectory:
    """Interpolate keyframe corrections over the online trajectory.

    The correction ``C_k = T_kf @ T_online(t_k)^-1`` is interpolated linearly in
    translation and by slerp in rotation, then applied on the left of every online
    pose. Outside the keyframe span the nearest correction is used.
    """
    if not keyframe_poses:
        return online
    kt = np.array([t for t, _ in keyframe_poses], dtype=float)
    if np.any(np.diff(kt) <= 0):
        raise ValueError("keyframes must be strictly time ordered")
    idx = np.searchsorted(online.times, kt)
    idx = np.clip(idx, 0, len(online) - 1)
    lower = np.clip(idx - 1, 0, len(online) - 1)
    idx = np.where(np.abs(online.times[lower] - kt) < np.abs(online.times[idx] - kt), lower, idx)
    if np.any(np.abs(online.times[idx] - kt) > time_tol):
        raise ValueError("keyframe timestamps must be online trajectory timestamps")
    corr = [T @ online.pose(i).inverse() for (_, T), i in zip(keyframe_poses, idx)]
    times = online.times
    outside = int(np.sum((times < kt[0]) | (times > kt[-1])))
    if outside:
        log.info("postprocess: %d poses outside the keyframe span use the nearest correction",
                 outside)
    tq = np.clip(times, kt[0], kt[-1])
    ct = np.array([C.translation for C in corr])
    trans = np.column_stack([np.interp(tq, kt, ct[:, a]) for a in range(3)])
    rots = Rotation.from_matrix(np.array([C.rotation for C in corr]))
    if len(kt) > 1:
        Rc = Slerp(kt, rots)(tq).as_matrix()
    else:
        Rc = np.repeat(rots.as_matrix(), len(times), axis=0)
    poses = [RigidTransform(Rc[k], trans[k]) @ online.pose(k) for k in range(len(times))]
    vel = None
    if online.velocities is not None:
        vel = np.einsum("nij,nj->ni", Rc, online.velocities)
    return Trajectory.from_poses(times, poses, vel)
