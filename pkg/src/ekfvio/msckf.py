"""Visual updates: track subset selection, differentiated triangulation, per-track EKF update."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .filter import FilterState, POSE_DIM, UpdateOutcome, gated_update, slot_start
from .geometry import quat_to_rotation, rotation_derivative


def update_subset(track, i: int, trail_frames, reuse_guard: bool = True) -> list:
    """Frames of ``track`` to use in a visual update on frame ``i``.

    The first element is the anchor frame b(i, j); the rest are frames not
    yet consumed by an earlier accepted update. Only frames stored in the
    pose trail are returned. Fewer than two frames means "skip".
    """
    frames = sorted(f for f in trail_frames if f is not None)
    if not frames:
        return []
    b_ij = max(frames[0], track.first_frame)
    usable = [f for f in frames if b_ij <= f <= i and track.has(f)]
    if not usable:
        return []
    anchor = usable[0]
    if reuse_guard and track.last_used is not None:
        start = max(track.last_used + 1, anchor + 1)
    else:
        start = anchor + 1
    return [anchor] + [f for f in usable[1:] if f >= start]


def track_length(track, subset) -> float:
    """Sum of L1 left-pixel steps ending at the non-anchor frames of ``subset``."""
    subset = list(subset)
    if not subset:
        raise ValueError("empty frame subset")
    anchor = subset[0]
    total = 0.0
    for f in subset[1:]:
        if f == anchor or not track.has(f - 1):
            continue
        total += float(np.abs(track.left_pixel(f) - track.left_pixel(f - 1)).sum())
    return total


def select_tracks(lengths: dict, max_attempts: int, rng: np.random.Generator,
                  longer_than_median: bool = True) -> list:
    """Random attempt order over tracks strictly longer than the (lower) median."""
    ids = sorted(lengths)
    if not ids:
        return []
    if longer_than_median:
        values = sorted(lengths[j] for j in ids)
        median = values[(len(values) - 1) // 2]
        eligible = [j for j in ids if lengths[j] > median]
        if not eligible:
            eligible = ids
    else:
        eligible = ids
    order = rng.permutation(len(eligible))
    return [eligible[k] for k in order[:max_attempts]]


@dataclass
class TriangulationResult:
    point: np.ndarray
    jacobian: Optional[np.ndarray]   # d point / d involved pose params, (3, 7m)
    rmse: float
    valid: bool
    reason: str = ""


def _perspective(xc):
    z = xc[:, 2]
    x, y = xc[:, 0], xc[:, 1]
    K = len(xc)
    D = np.zeros((K, 2, 3))
    D[:, 0, 0] = 1.0 / z
    D[:, 0, 2] = -x / z ** 2
    D[:, 1, 1] = 1.0 / z
    D[:, 1, 2] = -y / z ** 2
    return xc[:, :2] / z[:, None], D


def _perspective_hessian(xc):
    z = xc[:, 2]
    x, y = xc[:, 0], xc[:, 1]
    H = np.zeros((len(xc), 2, 3, 3))
    H[:, 0, 0, 2] = H[:, 0, 2, 0] = -1.0 / z ** 2
    H[:, 0, 2, 2] = 2.0 * x / z ** 3
    H[:, 1, 1, 2] = H[:, 1, 2, 1] = -1.0 / z ** 2
    H[:, 1, 2, 2] = 2.0 * y / z ** 3
    return H


class _ObservationModel:
    """Shared per-observation geometry for a set of trail poses.

    ``poses`` is (m, 7) of ``[p, q]``; observation ``i`` sees the point from pose
    ``slots[i]`` through camera ``cams[i]`` at normalized coordinates ``ys[i]``.
    """

    def __init__(self, poses, slots, cams, ys, rig):
        self.poses = np.asarray(poses, dtype=float)
        self.m = len(self.poses)
        self.n = POSE_DIM * self.m
        self.slots = np.asarray(slots, dtype=int)
        self.cams = np.asarray(cams, dtype=int)
        self.ys = np.asarray(ys, dtype=float).reshape(-1, 2)
        self.K = len(self.slots)
        self.R = np.stack([quat_to_rotation(p[3:]) for p in self.poses])
        self.dR = np.stack([rotation_derivative(p[3:]) for p in self.poses])   # (m, 4, 3, 3)
        ext = rig.imu_from_camera
        Rc = np.stack([ext[c].rotation for c in range(len(ext))])
        tc = np.stack([ext[c].translation for c in range(len(ext))])
        self.RcT = Rc[self.cams].transpose(0, 2, 1)
        self.tc = tc[self.cams]
        self.Rc = Rc[self.cams]
        self.Rq = self.R[self.slots]
        self.M = self.RcT @ self.Rq                        # d xc / d X
        self.p = self.poses[self.slots, :3]
        self.cols = POSE_DIM * self.slots[:, None] + np.arange(POSE_DIM)[None, :]
        self._DM = None

    def camera_points(self, X):
        w = X[None, :] - self.p
        xc = np.einsum("kab,kb->ka", self.M, w) - np.einsum("kab,kb->ka", self.RcT, self.tc)
        return xc, w

    def direct_jacobian(self, w):
        """d xc / d (p, q) of each observation's own slot, (K, 3, 7)."""
        E = np.empty((self.K, 3, POSE_DIM))
        E[:, :, :3] = -self.M
        dRw = np.einsum("kjab,kb->kaj", self.dR[self.slots], w)       # (K, 3, 4)
        E[:, :, 3:] = self.RcT @ dRw
        return E

    def rotation_scatter(self):
        """d M / d x as (K, 3, 3, n); independent of the point, so computed once."""
        if self._DM is None:
            dRq = np.einsum("kab,kjbc->kacj", self.RcT, self.dR[self.slots])   # (K,3,3,4)
            self._DM = self.scatter(dRq, offset=3)
        return self._DM

    def scatter(self, compact, offset: int = 0):
        """Place per-observation (K, ..., w) blocks into dense (K, ..., n) arrays.

        The block lands on the observation's slot columns ``offset:offset + w``.
        """
        width = compact.shape[-1]
        flat = compact.reshape(self.K, -1, width)
        out = np.zeros((self.K, flat.shape[1], self.n))
        idx = self.cols[:, offset:offset + width]
        out[np.arange(self.K)[:, None, None], np.arange(flat.shape[1])[None, :, None],
            idx[:, None, :]] = flat
        return out.reshape(compact.shape[:-1] + (self.n,))

    def ray(self, i):
        """Origin/direction of observation ``i`` and their (3, n) derivatives."""
        s = self.slots[i]
        R = self.R[s]
        ybar = np.array([self.ys[i, 0], self.ys[i, 1], 1.0])
        cam_dir = self.Rc[i] @ ybar
        o = R.T @ self.tc[i] + self.poses[s, :3]
        d = R.T @ cam_dir
        Do = np.zeros((3, self.n))
        Dd = np.zeros((3, self.n))
        c = POSE_DIM * s
        Do[:, c:c + 3] = np.eye(3)
        Do[:, c + 3:c + 7] = np.einsum("jba,b->aj", self.dR[s], self.tc[i])
        Dd[:, c + 3:c + 7] = np.einsum("jba,b->aj", self.dR[s], cam_dir)
        return o, d, Do, Dd


def _midpoint(o1, d1, o2, d2, Do1, Dd1, Do2, Dd2):
    """Midpoint of the closest approach of two rays, with forward-mode derivatives."""
    w0 = o1 - o2
    a, b, c = d1 @ d1, d1 @ d2, d2 @ d2
    dd, e = d1 @ w0, d2 @ w0
    K = np.array([[a, -b], [b, -c]])
    s, t = np.linalg.solve(K, [-dd, -e])
    X = 0.5 * (o1 + s * d1 + o2 + t * d2)
    if Do1 is None:
        return X, None
    Dw0 = Do1 - Do2
    Da = 2.0 * d1 @ Dd1
    Db = d2 @ Dd1 + d1 @ Dd2
    Dc = 2.0 * d2 @ Dd2
    Ddd = w0 @ Dd1 + d1 @ Dw0
    De = w0 @ Dd2 + d2 @ Dw0
    rhs = np.vstack([-Ddd - (Da * s - Db * t), -De - (Db * s - Dc * t)])
    Dst = np.linalg.solve(K, rhs)
    DX = 0.5 * (Do1 + np.outer(d1, Dst[0]) + s * Dd1 + Do2 + np.outer(d2, Dst[1]) + t * Dd2)
    return X, DX


def _ray_angle(d1, d2) -> float:
    c = d1 @ d2 / (np.linalg.norm(d1) * np.linalg.norm(d2))
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def _init_pairs(model: _ObservationModel):
    left = np.flatnonzero(model.cams == 0)
    pairs = []
    if len(left) >= 2:
        pairs.append((left[0], left[-1]))
    right = np.flatnonzero(model.cams == 1)
    if len(right):
        # stereo fallback when the left-only baseline is degenerate
        pairs.append((left[-1] if len(left) else right[0], right[-1]))
    return pairs


def _gn_step(model, X, DX, want_jacobian):
    xc, w = model.camera_points(X)
    uv, Dp = _perspective(xc)
    J = Dp @ model.M                                            # (K, 2, 3)
    r = uv - model.ys
    A = np.einsum("kra,krb->ab", J, J)
    b = np.einsum("kra,kr->a", J, r)
    delta = np.linalg.solve(A, b)
    if not want_jacobian:
        return delta, None
    E = model.scatter(model.direct_jacobian(w))                 # (K, 3, n)
    Dxc = np.einsum("kab,bn->kan", model.M, DX) + E
    Dr = np.einsum("kra,kan->krn", Dp, Dxc)
    dDp = np.einsum("krab,kbn->kran", _perspective_hessian(xc), Dxc)
    DM = model.rotation_scatter()
    DJ = np.einsum("kran,kab->krbn", dDp, model.M) + np.einsum("kra,kabn->krbn", Dp, DM)
    DA = np.einsum("krbn,krc->bcn", DJ, J)
    DA = DA + DA.transpose(1, 0, 2)
    Db = np.einsum("krbn,kr->bn", DJ, r) + np.einsum("krb,krn->bn", J, Dr)
    Ddelta = np.linalg.solve(A, Db - np.einsum("bcn,c->bn", DA, delta))
    return delta, Ddelta


def triangulate(poses, slots, cams, ys, rig, gn_iters: int = 5, want_jacobian: bool = True,
                min_angle_deg: float = 0.5, min_depth: float = 1e-3,
                step_tol: float = 1e-10) -> TriangulationResult:
    """Two-ray initialization refined by Gauss-Newton on the reprojection error.

    With ``want_jacobian`` the derivative of the returned point with respect to
    all pose parameters is carried through the initialization and every
    performed Gauss-Newton iteration.
    """
    model = poses if isinstance(poses, _ObservationModel) else \
        _ObservationModel(poses, slots, cams, ys, rig)
    chosen = None
    for i, j in _init_pairs(model):
        o1, d1, Do1, Dd1 = model.ray(i)
        o2, d2, Do2, Dd2 = model.ray(j)
        if np.degrees(_ray_angle(d1, d2)) >= min_angle_deg:
            chosen = (o1, d1, Do1, Dd1, o2, d2, Do2, Dd2)
            break
    if chosen is None:
        return TriangulationResult(np.full(3, np.nan), None, np.inf, False, "parallel rays")
    o1, d1, Do1, Dd1, o2, d2, Do2, Dd2 = chosen
    if not want_jacobian:
        Do1 = Dd1 = Do2 = Dd2 = None
    X, DX = _midpoint(o1, d1, o2, d2, Do1, Dd1, Do2, Dd2)

    for _ in range(gn_iters):
        xc, _ = model.camera_points(X)
        if np.any(xc[:, 2] <= min_depth):
            break
        try:
            delta, Ddelta = _gn_step(model, X, DX, want_jacobian)
        except np.linalg.LinAlgError:
            return TriangulationResult(X, None, np.inf, False, "singular normal equations")
        X = X - delta
        if want_jacobian:
            DX = DX - Ddelta
        if np.linalg.norm(delta) < step_tol:
            break

    xc, _ = model.camera_points(X)
    if not np.all(np.isfinite(X)) or np.any(xc[:, 2] <= min_depth):
        return TriangulationResult(X, None, np.inf, False, "behind camera")
    uv = xc[:, :2] / xc[:, 2:3]
    rmse = float(np.sqrt(np.mean(np.sum((uv - model.ys) ** 2, axis=1))))
    return TriangulationResult(X, DX, rmse, True)


def reprojection_model(poses, slots, cams, ys, rig, gn_iters: int = 5, want_jacobian=True):
    """Stacked ``h(x) = r_S(TRI(x), x) - y`` and its Jacobian w.r.t. the involved poses.

    Returns ``(h (2K,), J (2K, 7m) or None, TriangulationResult)``.
    """
    model = _ObservationModel(poses, slots, cams, ys, rig)
    tri = triangulate(model, None, None, None, rig, gn_iters, want_jacobian)
    if not tri.valid:
        return None, None, tri
    xc, w = model.camera_points(tri.point)
    uv, Dp = _perspective(xc)
    h = (uv - model.ys).ravel()
    if not want_jacobian:
        return h, None, tri
    E = model.scatter(model.direct_jacobian(w))
    Dxc = np.einsum("kab,bn->kan", model.M, tri.jacobian) + E
    J = np.einsum("kra,kan->krn", Dp, Dxc).reshape(2 * model.K, model.n)
    return h, J, tri


def track_observations(state: FilterState, track, subset, stereo: bool):
    """Gather (slot numbers, poses, per-observation slot/camera/coords) for ``subset``."""
    slot_numbers = [state.slot_frames.index(f) + 1 for f in subset]
    poses = np.stack([state.mean[slot_start(s):slot_start(s) + POSE_DIM] for s in slot_numbers])
    slots, cams, ys = [], [], []
    for k, f in enumerate(subset):
        slots.append(k)
        cams.append(0)
        ys.append(track.left(f))
        if stereo:
            right = track.right(f)
            if right is not None:
                slots.append(k)
                cams.append(1)
                ys.append(right)
    return slot_numbers, poses, np.array(slots), np.array(cams), np.array(ys)


@dataclass
class VisualUpdateResult:
    outcome: UpdateOutcome
    triangulation: Optional[TriangulationResult] = None
    residual_norm: float = np.nan
    dimension: int = 0


def visual_update(state: FilterState, track, subset, rig, sigma_norm: float,
                  gate_percentile: Optional[float] = 0.95, gn_iters: int = 5):
    """Per-track EKF update. Returns ``(state, VisualUpdateResult)``.

    Invalid triangulations are reported with ``UpdateOutcome.SINGULAR`` and
    leave the state untouched.
    """
    slot_numbers, poses, slots, cams, ys = track_observations(state, track, subset, rig.stereo)
    h, J, tri = reprojection_model(poses, slots, cams, ys, rig, gn_iters)
    if h is None:
        return state, VisualUpdateResult(UpdateOutcome.SINGULAR, tri)
    columns = np.concatenate([np.arange(slot_start(s), slot_start(s) + POSE_DIM)
                              for s in slot_numbers])
    R = sigma_norm ** 2 * np.eye(len(h))
    new_state, outcome = gated_update(state, -h, J, R, gate_percentile, columns)
    return new_state, VisualUpdateResult(outcome, tri, float(np.linalg.norm(h)), len(h))
