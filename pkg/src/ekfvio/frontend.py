"""Image-plane feature machinery: detection, pyramidal LK, stereo matching, outlier rejection."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .geometry import kabsch

_BLUR = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


@dataclass
class GrayImage:
    """8-bit grayscale image with a lazily built half-resolution pyramid (floats in [0, 1])."""

    data: np.ndarray
    _levels: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ValueError("grayscale image must be 2-D")
        self.data = data

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def level(self, k: int) -> np.ndarray:
        if not self._levels:
            self._levels.append(self.data.astype(np.float64) / 255.0)
        while len(self._levels) <= k:
            prev = self._levels[-1]
            blurred = ndimage.convolve1d(ndimage.convolve1d(prev, _BLUR, axis=0, mode="nearest"),
                                         _BLUR, axis=1, mode="nearest")
            self._levels.append(blurred[::2, ::2])   # ceil(n / 2) rows/cols
        return self._levels[k]

    def pyramid(self, n_levels: int) -> list:
        return [self.level(k) for k in range(n_levels)]


def pyramid_levels_for_window(window: int) -> int:
    return 3 if window <= 13 else 4


# --- detection -------------------------------------------------------------

def min_eigenvalue_response(img: np.ndarray, block: int = 3) -> np.ndarray:
    """Shi-Tomasi score: smaller eigenvalue of the block-summed structure tensor."""
    gx = ndimage.sobel(img, axis=1, mode="nearest") / 8.0
    gy = ndimage.sobel(img, axis=0, mode="nearest") / 8.0
    a = ndimage.uniform_filter(gx * gx, block, mode="nearest")
    b = ndimage.uniform_filter(gx * gy, block, mode="nearest")
    c = ndimage.uniform_filter(gy * gy, block, mode="nearest")
    return 0.5 * (a + c) - np.sqrt(0.25 * (a - c) ** 2 + b * b)


_FAST_CIRCLE = np.array([
    (0, -3), (1, -3), (2, -2), (3, -1), (3, 0), (3, 1), (2, 2), (1, 3),
    (0, 3), (-1, 3), (-2, 2), (-3, 1), (-3, 0), (-3, -1), (-2, -2), (-1, -3),
])


def _longest_circular_run(flags: np.ndarray) -> np.ndarray:
    """Longest run of True along axis 0 of a (16, H, W) stack, treating it as circular."""
    doubled = np.concatenate([flags, flags], axis=0)
    run = np.zeros(flags.shape[1:], dtype=np.int16)
    best = np.zeros_like(run)
    for k in range(doubled.shape[0]):
        run = np.where(doubled[k], run + 1, 0)
        np.maximum(best, run, out=best)
    return np.minimum(best, 16)


def fast_response(img: np.ndarray, threshold: float = 20.0 / 255.0, arc: int = 9) -> np.ndarray:
    """FAST segment-test corners; score is the summed contrast of the circle (0 if not a corner)."""
    h, w = img.shape
    score = np.zeros_like(img)
    if h < 7 or w < 7:
        return score
    center = img[3:h - 3, 3:w - 3]
    ring = np.stack([img[3 + dy:h - 3 + dy, 3 + dx:w - 3 + dx] for dx, dy in _FAST_CIRCLE])
    brighter = ring > center + threshold
    darker = ring < center - threshold
    corner = (_longest_circular_run(brighter) >= arc) | (_longest_circular_run(darker) >= arc)
    contrast = np.maximum(np.abs(ring - center) - threshold, 0.0).sum(axis=0)
    score[3:h - 3, 3:w - 3] = np.where(corner, contrast, 0.0)
    return score


def _subpixel_offset(score: np.ndarray, r: int, c: int):
    """Peak offset from a separable quadratic fit over the 3x3 neighbourhood."""
    h, w = score.shape
    if not (0 < r < h - 1 and 0 < c < w - 1):
        return 0.0, 0.0
    s0 = score[r, c]
    out = []
    for a, b in ((score[r, c - 1], score[r, c + 1]), (score[r - 1, c], score[r + 1, c])):
        denom = a - 2.0 * s0 + b
        out.append(float(np.clip(0.5 * (a - b) / denom, -0.5, 0.5)) if denom < 0 else 0.0)
    return out[0], out[1]


class _SpacingGrid:
    """Bucketed point set answering 'is anything within r of p' in O(1)."""

    def __init__(self, r: float):
        self.r = r
        self.cells: dict = {}

    def _key(self, p):
        return int(math.floor(p[0] / self.r)), int(math.floor(p[1] / self.r))

    def add(self, p) -> None:
        self.cells.setdefault(self._key(p), []).append((float(p[0]), float(p[1])))

    def near(self, p) -> bool:
        kx, ky = self._key(p)
        r2 = self.r * self.r
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                for q in self.cells.get((kx + dx, ky + dy), ()):
                    if (q[0] - p[0]) ** 2 + (q[1] - p[1]) ** 2 < r2:
                        return True
        return False


def detect_features(image: GrayImage, existing, budget: int, min_distance: float = 15.0,
                    detector: str = "gftt", subpixel: bool = True, quality_level: float = 0.01,
                    fast_threshold: float = 20.0, margin: int = 4) -> np.ndarray:
    """Up to ``budget`` new corners at least ``min_distance`` from each other and ``existing``."""
    if budget <= 0:
        return np.zeros((0, 2))
    img = image.level(0)
    if detector == "gftt":
        score = min_eigenvalue_response(img)
    elif detector == "fast":
        score = fast_response(img, fast_threshold / 255.0)
    else:
        raise ValueError(f"unknown detector {detector!r}")
    peak = score.max()
    if peak <= 0:
        return np.zeros((0, 2))
    local_max = score == ndimage.maximum_filter(score, size=3, mode="nearest")
    mask = local_max & (score >= quality_level * peak) & (score > 0)
    mask[:margin, :] = mask[-margin:, :] = False
    mask[:, :margin] = mask[:, -margin:] = False
    rows, cols = np.nonzero(mask)
    order = np.argsort(-score[rows, cols], kind="stable")

    grid = _SpacingGrid(min_distance)
    for p in np.asarray(existing, dtype=float).reshape(-1, 2):
        grid.add(p)
    found = []
    for k in order:
        r, c = rows[k], cols[k]
        p = (float(c), float(r))
        if subpixel:
            dx, dy = _subpixel_offset(score, r, c)
            p = (c + dx, r + dy)
        if grid.near(p):
            continue
        grid.add(p)
        found.append(p)
        if len(found) >= budget:
            break
    return np.array(found, dtype=float).reshape(-1, 2)


# --- Lucas-Kanade ----------------------------------------------------------

def _sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    return ndimage.map_coordinates(img, [ys.ravel(), xs.ravel()], order=1,
                                   mode="nearest").reshape(xs.shape)


def lk_track(prev: GrayImage, nxt: GrayImage, points, predictions=None, window: int = 31,
             max_iterations: int = 20, levels: Optional[int] = None, eps: float = 0.01,
             min_eigenvalue: float = 1e-4, margin: float = 1.0, min_ncc: float = 0.5):
    """Pyramidal Lucas-Kanade (forward additive, Bouguet-style) for a batch of points.

    Returns ``(points (N, 2), status (N,) bool)``. ``predictions`` initialize the
    flow guess that is carried down the pyramid. A final patch whose normalized
    cross-correlation with the template is below ``min_ncc`` counts as lost.
    """
    if window % 2 != 1:
        raise ValueError("window must be odd")
    if prev.data.shape != nxt.data.shape:
        raise ValueError("images must have the same dimensions")
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    n = len(pts)
    if n == 0:
        return np.zeros((0, 2)), np.zeros(0, dtype=bool)
    if levels is None:
        levels = pyramid_levels_for_window(window)
    guess = np.zeros_like(pts) if predictions is None else \
        np.asarray(predictions, dtype=float).reshape(-1, 2) - pts
    half = window // 2
    offs = np.arange(-half, half + 1, dtype=float)
    ox, oy = np.meshgrid(offs, offs)
    status = np.ones(n, dtype=bool)
    top = levels - 1
    flow = guess / (2.0 ** top)
    for lvl in range(top, -1, -1):
        I = prev.level(lvl)
        J = nxt.level(lvl)
        scale = 2.0 ** lvl
        p = pts / scale
        px = p[:, 0, None, None] + ox
        py = p[:, 1, None, None] + oy
        tmpl = _sample(I, px, py)
        gx = 0.5 * (_sample(I, px + 1.0, py) - _sample(I, px - 1.0, py))
        gy = 0.5 * (_sample(I, px, py + 1.0) - _sample(I, px, py - 1.0))
        gxx = (gx * gx).sum(axis=(1, 2))
        gxy = (gx * gy).sum(axis=(1, 2))
        gyy = (gy * gy).sum(axis=(1, 2))
        det = gxx * gyy - gxy * gxy
        lam = 0.5 * (gxx + gyy) - np.sqrt(0.25 * (gxx - gyy) ** 2 + gxy ** 2)
        status &= lam / (window * window) >= min_eigenvalue
        det = np.where(np.abs(det) > 1e-18, det, 1.0)
        active = status.copy()
        for _ in range(max_iterations):
            idx = np.flatnonzero(active)
            if len(idx) == 0:
                break
            warped = _sample(J, px[idx] + flow[idx, 0, None, None], py[idx] + flow[idx, 1, None, None])
            err = tmpl[idx] - warped
            bx = (err * gx[idx]).sum(axis=(1, 2))
            by = (err * gy[idx]).sum(axis=(1, 2))
            dx = (gyy[idx] * bx - gxy[idx] * by) / det[idx]
            dy = (gxx[idx] * by - gxy[idx] * bx) / det[idx]
            flow[idx, 0] += dx
            flow[idx, 1] += dy
            active[idx[np.hypot(dx, dy) < eps]] = False
        if lvl > 0:
            flow *= 2.0
    if status.any():
        # px, py, tmpl are the level-0 patches here
        idx = np.flatnonzero(status)
        warped = _sample(J, px[idx] + flow[idx, 0, None, None], py[idx] + flow[idx, 1, None, None])
        a = tmpl[idx] - tmpl[idx].mean(axis=(1, 2), keepdims=True)
        b = warped - warped.mean(axis=(1, 2), keepdims=True)
        denom = np.sqrt((a * a).sum(axis=(1, 2)) * (b * b).sum(axis=(1, 2)))
        ncc = np.where(denom > 1e-12, (a * b).sum(axis=(1, 2)) / np.maximum(denom, 1e-12), 0.0)
        status[idx] = ncc >= min_ncc
    out = pts + flow
    h, w = prev.data.shape
    inside = ((out[:, 0] >= margin) & (out[:, 0] <= w - 1 - margin)
              & (out[:, 1] >= margin) & (out[:, 1] <= h - 1 - margin))
    status &= inside & np.all(np.isfinite(out), axis=1)
    return out, status


def stereo_match(left: GrayImage, right: GrayImage, left_points, rig, epipolar_tol: float = 2e-3,
                 nominal_depth: float = 5.0, window: int = 31, max_iterations: int = 20,
                 levels: Optional[int] = None):
    """Match left points into the right image; returns ``(right_points, status)``."""
    if not rig.stereo:
        raise ValueError("stereo matching needs a two-camera rig")
    pts = np.asarray(left_points, dtype=float).reshape(-1, 2)
    if len(pts) == 0:
        return np.zeros((0, 2)), np.zeros(0, dtype=bool)
    left_cam, right_cam = rig.cameras
    left_norm, ok_left = left_cam.normalized_coords(pts)
    X = np.column_stack([left_norm, np.ones(len(pts))]) * nominal_depth
    Xr = rig.right_from_left().apply(X)
    front = Xr[:, 2] > 1e-6
    Xr[~front, 2] = 1.0
    pred = right_cam.project(Xr)
    pred = np.where(front[:, None] & ok_left[:, None], pred, pts)
    matched, status = lk_track(left, right, pts, pred, window, max_iterations, levels)
    right_norm, ok_right = right_cam.normalized_coords(matched)
    status &= ok_left & ok_right & right_cam.in_image(matched)
    resid = np.full(len(pts), np.inf)
    if status.any():
        resid[status] = rig.epipolar_residuals(left_norm[status], right_norm[status])
    status &= resid <= epipolar_tol
    return matched, status


# --- outlier rejection -----------------------------------------------------

def _bearings(norm) -> np.ndarray:
    b = np.column_stack([norm, np.ones(len(norm))])
    return b / np.linalg.norm(b, axis=1, keepdims=True)


def _mono_residuals(R, bp, bn, t):
    rotated = bp @ R.T
    if t is not None and np.linalg.norm(t) > 1e-9:
        normal = np.cross(np.broadcast_to(t, rotated.shape), rotated)
        nn = np.linalg.norm(normal, axis=1)
        ok = nn > 1e-6
        res = np.linalg.norm(bn - rotated, axis=1)
        res[ok] = np.abs(np.sum(bn[ok] * normal[ok], axis=1)) / nn[ok]
        return res
    return np.linalg.norm(bn - rotated, axis=1)


def _stereo_points(left_norm, right_norm, rig, min_depth=0.1, max_depth=200.0):
    """Midpoint triangulation of stereo pairs in left-camera coordinates (depth clipped)."""
    T = rig.right_from_left().inverse()            # right camera -> left camera
    d1 = np.column_stack([left_norm, np.ones(len(left_norm))])
    d2 = np.column_stack([right_norm, np.ones(len(right_norm))]) @ T.rotation.T
    o2 = T.translation
    a = np.sum(d1 * d1, axis=1)
    b = np.sum(d1 * d2, axis=1)
    c = np.sum(d2 * d2, axis=1)
    d = d1 @ -o2
    e = d2 @ -o2
    den = a * c - b * b
    ok = den > 1e-12
    den = np.where(ok, den, 1.0)
    s = (b * e - c * d) / den
    depth = np.where(ok, s, max_depth)
    depth = np.clip(depth, min_depth, max_depth)
    return d1 * depth[:, None]


def ransac_reject(prev_norm, next_norm, predicted_rotation=None, mode: str = "mono",
                  threshold: float = 5e-3, max_iters: int = 100, seed: int = 0,
                  predicted_translation=None, prev_right=None, next_right=None, rig=None):
    """Inlier mask for correspondences between two consecutive frames.

    Mono: 2-point rotation hypotheses on bearings (plus the predicted rotation as
    a free hypothesis); when a predicted translation is given the score is the
    distance to the implied epipolar plane, otherwise the rotated-bearing error.
    Stereo: 3-point rigid alignments of stereo-triangulated points (plus the
    predicted motion), scored by reprojection into the next left image.
    All inputs are normalized coordinates of the left camera (and right for stereo).
    """
    prev_norm = np.asarray(prev_norm, dtype=float).reshape(-1, 2)
    next_norm = np.asarray(next_norm, dtype=float).reshape(-1, 2)
    n = len(prev_norm)
    mask = np.ones(n, dtype=bool)
    rng = np.random.default_rng(seed)
    if mode == "mono":
        if n < 2:
            return mask
        bp, bn = _bearings(prev_norm), _bearings(next_norm)
        t = None if predicted_translation is None else np.asarray(predicted_translation, float)

        def score(R):
            return _mono_residuals(R, bp, bn, t)

        hyps = [] if predicted_rotation is None else [np.asarray(predicted_rotation, float)]
        sample_size = 2
        fit = lambda idx: kabsch(bp[idx], bn[idx], with_translation=False)[0]   # noqa: E731
    elif mode == "stereo":
        if n < 3 or rig is None or prev_right is None or next_right is None:
            return mask
        P0 = _stereo_points(prev_norm, np.asarray(prev_right, float).reshape(-1, 2), rig)
        P1 = _stereo_points(next_norm, np.asarray(next_right, float).reshape(-1, 2), rig)

        def score(Rt):
            R, tt = Rt
            X = P0 @ R.T + tt
            z = np.where(X[:, 2] > 1e-6, X[:, 2], np.nan)
            res = np.linalg.norm(X[:, :2] / z[:, None] - next_norm, axis=1)
            return np.where(np.isfinite(res), res, np.inf)

        hyps = []
        if predicted_rotation is not None and predicted_translation is not None:
            hyps.append((np.asarray(predicted_rotation, float),
                         np.asarray(predicted_translation, float)))
        sample_size = 3
        fit = lambda idx: kabsch(P0[idx], P1[idx])   # noqa: E731
    else:
        raise ValueError(f"unknown mode {mode!r}")

    best_count, best = -1, None
    for h in hyps:
        inl = score(h) < threshold
        if inl.sum() > best_count:
            best_count, best = int(inl.sum()), inl
    for _ in range(max_iters):
        idx = rng.choice(n, size=sample_size, replace=False)
        inl = score(fit(idx)) < threshold
        c = int(inl.sum())
        if c > best_count:
            best_count, best = c, inl
            if c == n:
                break
    if best is None or best_count < sample_size:
        return mask
    # refit on the consensus set and rescore once
    refined = score(fit(np.flatnonzero(best))) < threshold
    return refined if refined.sum() >= best_count else best
