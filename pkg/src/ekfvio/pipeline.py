"""The VIO (+ optional SLAM) orchestration loop."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import DatasetConfig
from .dataset import FrameObservations, Sequence, load_gray
from .features import FeatureTrack
from .filter import (
    BASE_DIM,
    FilterState,
    ImuGapError,
    ImuSample,
    POSE_DIM,
    UpdateOutcome,
    augment_pose,
    choose_discard_index,
    initialize,
    is_stationary,
    predict,
    slot_start,
    unaugment_pose,
)
from .frontend import ransac_reject
from .geometry import RigidTransform, camera_pose, quat_to_rotation
from .msckf import select_tracks, track_length, update_subset, visual_update
from .trajectory import Trajectory

log = logging.getLogger(__name__)


class PipelineError(RuntimeError):
    pass


class FilterDivergence(PipelineError):
    pass


@dataclass
class RunMetrics:
    frame_ms: list = field(default_factory=list)
    accepted: list = field(default_factory=list)
    gated: list = field(default_factory=list)
    singular: list = field(default_factory=list)
    stationary: list = field(default_factory=list)
    stationary_in_trail: list = field(default_factory=list)
    ransac_rejected: int = 0
    epipolar_rejected: int = 0
    gap_events: list = field(default_factory=list)
    used_observations: list = field(default_factory=list)   # (track id, frame) per accepted update

    def summary(self) -> dict:
        ms = np.asarray(self.frame_ms) if self.frame_ms else np.zeros(1)
        return {
            "frames": len(self.frame_ms),
            "mean_frame_ms": float(ms.mean()),
            "accepted_updates": int(np.sum(self.accepted)),
            "gated_updates": int(np.sum(self.gated)),
            "stationary_frames": int(np.sum(self.stationary)),
            "ransac_rejected": self.ransac_rejected,
            "epipolar_rejected": self.epipolar_rejected,
            "gap_events": len(self.gap_events),
        }


@dataclass
class RunResult:
    online: Trajectory
    postprocessed: Optional[Trajectory]
    metrics: RunMetrics
    final_state: Optional[FilterState]
    vio: Optional[Trajectory] = None          # raw VIO poses (no SLAM mapping)
    slam: Optional[object] = None


def imu_pose(state: FilterState) -> RigidTransform:
    """Body-to-world transform of the current pose."""
    return RigidTransform(quat_to_rotation(state.orientation).T, state.position)


class VioPipeline:
    """Stateful per-event processor; :func:`run_pipeline` drives it over a Sequence."""

    def __init__(self, config: DatasetConfig):
        self.cfg = config
        self.p = config.params
        self.rig = config.rig
        self.noise = config.noise
        self.state: Optional[FilterState] = None
        self.pending_accel: list = []
        self.last_imu_time: Optional[float] = None
        self.last_imu = None
        self.tracks: dict = {}
        self.alias: dict = {}          # external id -> internal id
        self.next_internal = 0
        self.prev_pose = None          # (p, q) after updates of the previous frame
        self.prev_frame: Optional[int] = None
        self.stationary_frames: set = set()
        self.rng = np.random.default_rng(self.p.seed)
        self.metrics = RunMetrics()
        self.image_tracker = None
        self.slam = None
        self.keypoint_buffer: dict = {}
        self.mapping = RigidTransform.identity()
        if self.p.slam:
            from .slam import SlamSystem
            self.slam = SlamSystem(self.p, self.rig)

    # --- IMU ---------------------------------------------------------------
    def on_imu(self, sample) -> None:
        raw = sample
        if self.state is None:
            self.pending_accel.append(np.asarray(sample.accel, dtype=float))
            self.last_imu_time = sample.timestamp
            self.last_imu = raw
            return
        if self.p.imu_midpoint and self.last_imu is not None:
            # readings are instantaneous; use their interval average for the step
            prev = self.last_imu
            sample = ImuSample(sample.timestamp,
                               0.5 * (np.asarray(prev.gyro) + np.asarray(sample.gyro)),
                               0.5 * (np.asarray(prev.accel) + np.asarray(sample.accel)))
        self.last_imu = raw
        try:
            self.state = predict(self.state, sample, self.noise)
        except ImuGapError as exc:
            self.metrics.gap_events.append((sample.timestamp, str(exc)))
            if sample.timestamp > self.state.time:
                # skip the integration across the gap but keep the clock moving
                self.state.time = sample.timestamp
        self.last_imu_time = sample.timestamp

    def _ensure_initialized(self, t: float) -> bool:
        if self.state is not None:
            return True
        if not self.pending_accel:
            return False
        first = np.array(self.pending_accel[: max(1, min(len(self.pending_accel), 20))])
        self.state = initialize(first, self.noise, self.p.n_a, time=self.last_imu_time or t)
        self.pending_accel = []
        return True

    # --- observations ------------------------------------------------------
    def _internal_id(self, ext: int, frame: int) -> int:
        j = self.alias.get(ext)
        if j is not None:
            tr = self.tracks.get(j)
            if tr is not None and tr.last_frame == frame - 1:
                return j
        j = self.next_internal
        self.next_internal += 1
        self.alias[ext] = j
        return j

    def _terminate(self, internal_ids) -> None:
        for j in internal_ids:
            self.tracks.pop(j, None)
        if self.image_tracker is not None:
            back = {v: k for k, v in self.alias.items()}
            self.image_tracker.drop([back[j] for j in internal_ids if j in back])
        dead = set(internal_ids)
        for ext in [e for e, j in self.alias.items() if j in dead]:
            del self.alias[ext]

    def _ingest(self, obs: FrameObservations, k: int):
        """Normalize, epipolar-check and append observations; returns internal ids seen at k."""
        cams = self.rig.cameras
        left_n, ok = cams[0].normalized_coords(obs.left) if len(obs.ids) else \
            (np.zeros((0, 2)), np.zeros(0, bool))
        right_n = None
        if self.rig.stereo:
            if obs.right is None:
                raise PipelineError(f"frame {k}: stereo configuration but no right observations")
            right_n, ok_r = cams[1].normalized_coords(obs.right) if len(obs.ids) else \
                (np.zeros((0, 2)), np.zeros(0, bool))
            ok &= ok_r & np.all(np.isfinite(obs.right), axis=1)
            if ok.any():
                res = np.full(len(ok), np.inf)
                res[ok] = self.rig.epipolar_residuals(left_n[ok], right_n[ok])
                bad = ok & (res > self.p.epipolar_tol)
                self.metrics.epipolar_rejected += int(bad.sum())
                ok &= ~bad
        seen = []
        for n in np.flatnonzero(ok):
            ext = int(obs.ids[n])
            j = self._internal_id(ext, k)
            tr = self.tracks.get(j)
            if tr is None:
                tr = FeatureTrack(j, k)
                self.tracks[j] = tr
            tr.add(k, obs.left[n], left_n[n],
                   None if right_n is None else obs.right[n],
                   None if right_n is None else right_n[n])
            seen.append(j)
        return seen

    def _relative_camera_motion(self):
        """Predicted rotation/translation taking previous-frame camera coords to current ones."""
        if self.prev_pose is None:
            return None, None
        ext = self.rig.imu_from_camera[0]
        c0 = camera_pose(self.prev_pose[0], self.prev_pose[1], ext)
        c1 = camera_pose(self.state.position, self.state.orientation, ext)
        rel = c1.inverse() @ c0
        return rel.rotation, rel.translation

    def _ransac(self, seen, k: int) -> None:
        both = [j for j in seen if self.tracks[j].has(k - 1)]
        if len(both) < 2:
            return
        trs = [self.tracks[j] for j in both]
        prev_n = np.array([t.left(k - 1) for t in trs])
        next_n = np.array([t.left(k) for t in trs])
        R, t = self._relative_camera_motion()
        thr = self.p.ransac_threshold_px / self.rig.cameras[0].mean_focal
        seed = int(self.rng.integers(2 ** 31))
        if self.rig.stereo:
            mask = ransac_reject(prev_n, next_n, R, "stereo", thr, self.p.ransac_iters, seed,
                                 predicted_translation=t,
                                 prev_right=np.array([t_.right(k - 1) for t_ in trs]),
                                 next_right=np.array([t_.right(k) for t_ in trs]), rig=self.rig)
        else:
            mask = ransac_reject(prev_n, next_n, R, "mono", thr, self.p.ransac_iters, seed,
                                 predicted_translation=t)
        bad = [j for j, m in zip(both, mask) if not m]
        self.metrics.ransac_rejected += len(bad)
        self._terminate(bad)

    # --- per-frame step ----------------------------------------------------
    def on_frame(self, k: int, t: float, obs: Optional[FrameObservations] = None,
                 images=None) -> Optional[RigidTransform]:
        tic = time.perf_counter()
        if not self._ensure_initialized(t):
            return None
        p = self.p
        if obs is None:
            obs = self._track_images(k, images)
        seen = self._ingest(obs, k)
        if p.use_ransac and k - 1 == self.prev_frame:
            self._ransac([j for j in seen if j in self.tracks], k)
        seen = [j for j in seen if j in self.tracks]

        # stationarity from left-pixel displacements of co-observed tracks
        disp = [self.tracks[j].left_pixel(k) - self.tracks[j].left_pixel(k - 1)
                for j in seen if self.tracks[j].has(k - 1)]
        stationary = p.use_stationarity and is_stationary(disp, p.stationary_px)

        st = self.state
        st.frame_index = k
        cov = [0 if f is None else sum(1 for j in seen if self.tracks[j].has(f))
               for f in st.slot_frames]
        if p.use_hanoi:
            d = choose_discard_index(k, p.n_fifo, p.n_a, cov)
        else:
            d = choose_discard_index(k, p.n_a, p.n_a, cov)
        st = augment_pose(st, d)
        self._trim_tracks(st, k)

        st, acc, gated, sing = self._visual_updates(st, k)
        if stationary:
            st = unaugment_pose(st, self.noise.unaugment_sigma)
            self.stationary_frames.add(k)
        self.state = st
        self._check_divergence(k)

        self.metrics.accepted.append(acc)
        self.metrics.gated.append(gated)
        self.metrics.singular.append(sing)
        self.metrics.stationary.append(bool(stationary))
        self.metrics.stationary_in_trail.append(
            sum(1 for f in st.slot_frames if f in self.stationary_frames))

        self.prev_pose = (st.position.copy(), st.orientation.copy())
        self.prev_frame = k
        pose = imu_pose(st)
        if self.slam is not None:
            self._slam_step(k, t, seen)
            pose = self.mapping @ pose
        self.metrics.frame_ms.append(1e3 * (time.perf_counter() - tic))
        return pose

    def _track_images(self, k: int, images) -> FrameObservations:
        if self.image_tracker is None:
            from .tracker import ImageTracker
            self.image_tracker = ImageTracker(self.rig, self.p)
        left, right = images
        obs = self.image_tracker.process(k, left, right, self._lk_predictions())
        return obs

    def _lk_predictions(self) -> dict:
        """Reprojections of previously triangulated points into the predicted camera pose."""
        if self.state is None or not self.alias:
            return {}
        cam_T = camera_pose(self.state.position, self.state.orientation,
                            self.rig.imu_from_camera[0]).inverse()
        cam = self.rig.cameras[0]
        out = {}
        for ext, j in self.alias.items():
            tr = self.tracks.get(j)
            if tr is None or tr.point is None:
                continue
            xc = cam_T.apply(tr.point)
            if xc[2] > 0.1:
                out[ext] = cam.project(xc)[0]
        return out

    def _trim_tracks(self, st: FilterState, k: int) -> None:
        frames = [f for f in st.slot_frames if f is not None]
        oldest = min(frames) if frames else k
        for j in list(self.tracks):
            tr = self.tracks[j]
            if tr.last_frame < k - 1 or tr.last_frame < oldest:
                del self.tracks[j]
            else:
                tr.trim_before(oldest - 1)

    def _visual_updates(self, st: FilterState, k: int):
        p = self.p
        subsets, lengths = {}, {}
        for j, tr in self.tracks.items():
            S = update_subset(tr, k, st.slot_frames, p.use_reuse_guard)
            if len(S) >= 2:
                subsets[j] = S
                lengths[j] = track_length(tr, S)
        order = select_tracks(lengths, p.max_attempts_factor * p.n_target, self.rng,
                              p.use_median_selection)
        gate = p.gate_percentile if p.use_gate else None
        sigma = self.cfg.sigma_normalized
        acc = gated = sing = 0
        for j in order:
            if acc >= p.n_target:
                break
            tr = self.tracks[j]
            st, res = visual_update(st, tr, subsets[j], self.rig, sigma, gate, p.gn_iters)
            if res.triangulation is not None and res.triangulation.valid:
                tr.point = res.triangulation.point
            if res.outcome is UpdateOutcome.ACCEPTED:
                acc += 1
                tr.last_used = max(subsets[j])
                self.metrics.used_observations.append((j, tuple(subsets[j][1:])))
            elif res.outcome is UpdateOutcome.GATED:
                gated += 1
            else:
                sing += 1
        return st, acc, gated, sing

    def _check_divergence(self, k: int) -> None:
        P = self.state.cov[:BASE_DIM, :BASE_DIM]
        tr = float(np.trace(P))
        if not np.isfinite(tr) or tr > self.p.divergence_trace or \
                not np.all(np.isfinite(self.state.mean)):
            raise FilterDivergence(
                f"filter diverged at frame {k}: base covariance trace {tr:.3e}; "
                f"position {self.state.position}, velocity {self.state.velocity}")

    # --- SLAM --------------------------------------------------------------
    def _slam_step(self, k: int, t: float, seen) -> None:
        st = self.state
        ext = self.rig.imu_from_camera[0]
        self.keypoint_buffer[k] = (t, [(j, self.tracks[j].left_pixel(k), self.tracks[j].left(k))
                                       for j in seen])
        n = min(self.p.slam_every, st.n_a)
        for old in [f for f in self.keypoint_buffer if f < k - 4 * self.p.slam_every]:
            del self.keypoint_buffer[old]
        if k % self.p.slam_every != 0:
            return
        self.mapping = self.slam.block()
        frame = st.slot_frames[n - 1]
        if frame is None or frame not in self.keypoint_buffer:
            return
        s = slot_start(n)
        T_in = camera_pose(st.mean[s:s + 3], st.mean[s + 3:s + POSE_DIM], ext)
        t_in, kps = self.keypoint_buffer[frame]
        self.slam.submit(t_in, T_in, kps, frame)


def _frame_images(seq: Sequence, k: int):
    left, right = seq.image_paths[k]
    return load_gray(left), (load_gray(right) if right is not None else None)


def run_pipeline(seq: Sequence, config: DatasetConfig, progress=None) -> RunResult:
    """Process a whole sequence; one output row per processed camera frame."""
    if seq.tracks is None and seq.image_paths is None:
        raise PipelineError("sequence has neither precomputed tracks nor images")
    pipe = VioPipeline(config)
    times, poses, vels, covs = [], [], [], []
    vio_poses = []
    for kind, item in seq.events(config.time_shift):
        if kind == "imu":
            pipe.on_imu(item)
            continue
        k = item
        t = float(seq.frame_times[k] + config.time_shift)
        if seq.tracks is not None:
            pose = pipe.on_frame(k, t, obs=seq.tracks[k])
        else:
            pose = pipe.on_frame(k, t, images=_frame_images(seq, k))
        if pose is None:
            continue
        st = pipe.state
        if times and t <= times[-1]:
            continue
        times.append(t)
        poses.append(pose)
        vio_poses.append(imu_pose(st))
        vels.append(pipe.mapping.rotation @ st.velocity)
        R = pipe.mapping.rotation
        covs.append(R @ st.cov[:3, :3] @ R.T)
        if progress is not None:
            progress(k, seq.n_frames)
    if pipe.slam is not None:
        pipe.slam.block()
    online = Trajectory.from_poses(times, poses, np.array(vels).reshape(-1, 3),
                                   np.array(covs).reshape(-1, 3, 3))
    vio = Trajectory.from_poses(times, vio_poses)
    post = None
    if pipe.slam is not None and config.params.postprocess:
        from .slam import postprocess
        post = postprocess(pipe.slam.keyframe_imu_poses(), vio)
    return RunResult(online, post, pipe.metrics, pipe.state, vio, pipe.slam)
