"""Per-frame image tracker producing FrameObservations from raw images."""
from __future__ import annotations

from typing import Optional

import numpy as np

from .dataset import FrameObservations
from .frontend import GrayImage, detect_features, lk_track, pyramid_levels_for_window, stereo_match


def _enforce_spacing(points: np.ndarray, min_distance: float) -> np.ndarray:
    """Keep-mask dropping later (younger) points closer than ``min_distance`` to earlier ones."""
    keep = np.ones(len(points), dtype=bool)
    if len(points) < 2:
        return keep
    d2 = np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=-1)
    close = np.triu(d2 < min_distance ** 2, k=1)
    for i in range(len(points)):
        if keep[i]:
            keep[np.flatnonzero(close[i])] = False
    return keep


class ImageTracker:
    """LK temporal tracking on the left camera, per-frame stereo re-matching, replenishment."""

    def __init__(self, rig, params):
        self.rig = rig
        self.p = params
        self.levels = pyramid_levels_for_window(params.lk_window)
        self.prev: Optional[GrayImage] = None
        self.ids = np.zeros(0, dtype=int)
        self.points = np.zeros((0, 2))
        self.next_id = 0

    @property
    def max_features(self) -> int:
        return self.p.max_features_stereo if self.rig.stereo else self.p.max_features_mono

    def drop(self, ids) -> None:
        keep = ~np.isin(self.ids, np.asarray(list(ids), dtype=int))
        self.ids, self.points = self.ids[keep], self.points[keep]

    def process(self, frame_index: int, left: np.ndarray, right: Optional[np.ndarray] = None,
                predictions: Optional[dict] = None) -> FrameObservations:
        img = GrayImage(left)
        p = self.p
        cam = self.rig.cameras[0]
        if self.prev is not None and len(self.ids):
            preds = None
            if predictions:
                preds = self.points.copy()
                for k, j in enumerate(self.ids):
                    if j in predictions:
                        preds[k] = predictions[j]
            pts, ok = lk_track(self.prev, img, self.points, preds, p.lk_window,
                               p.lk_max_iterations, self.levels)
            ok &= cam.in_image(pts, margin=2.0)
            self.ids, self.points = self.ids[ok], pts[ok]
            keep = _enforce_spacing(self.points, p.min_distance)
            self.ids, self.points = self.ids[keep], self.points[keep]
        if len(self.ids) < p.replenish_ratio * self.max_features:
            new = detect_features(img, self.points, self.max_features - len(self.ids),
                                  p.min_distance, p.detector, p.subpixel)
            self.ids = np.concatenate([self.ids, self.next_id + np.arange(len(new))])
            self.points = np.vstack([self.points, new])
            self.next_id += len(new)
        right_pts = None
        if self.rig.stereo:
            if right is None:
                raise ValueError("stereo rig needs a right image")
            rp, ok = stereo_match(img, GrayImage(right), self.points, self.rig, p.epipolar_tol,
                                  p.nominal_depth, p.lk_window, p.lk_max_iterations, self.levels)
            # stereo tracks must carry a right observation on every frame
            self.ids, self.points, right_pts = self.ids[ok], self.points[ok], rp[ok]
        self.prev = img
        return FrameObservations(frame_index, self.ids.copy(), self.points.copy(), right_pts)
