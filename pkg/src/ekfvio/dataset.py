"""Sequence containers, EuRoC (ASL layout) ingestion and precomputed-track files."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .filter import ImuSample
from .trajectory import Trajectory


class DatasetError(ValueError):
    pass


@dataclass
class FrameObservations:
    """Feature observations of one camera frame (pixel coordinates)."""

    frame_index: int
    ids: np.ndarray
    left: np.ndarray
    right: Optional[np.ndarray] = None

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=int).reshape(-1)
        self.left = np.asarray(self.left, dtype=float).reshape(-1, 2)
        if self.right is not None:
            self.right = np.asarray(self.right, dtype=float).reshape(-1, 2)


@dataclass
class Sequence:
    imu: list
    frame_times: np.ndarray
    rig: Optional[object] = None
    tracks: Optional[list] = None            # list[FrameObservations], one per frame
    image_paths: Optional[list] = None       # list[(left, right | None)]
    ground_truth: Optional[Trajectory] = None
    name: str = ""
    notes: list = field(default_factory=list)

    def __post_init__(self):
        self.frame_times = np.asarray(self.frame_times, dtype=float)

    @property
    def n_frames(self) -> int:
        return len(self.frame_times)

    def events(self, time_shift: float = 0.0):
        """Merged ``("imu", ImuSample)`` / ``("frame", index)`` stream in time order.

        A frame sharing its timestamp with an IMU sample comes after the sample.
        """
        i = 0
        imu = self.imu
        ft = self.frame_times + time_shift
        for k, t in enumerate(ft):
            while i < len(imu) and imu[i].timestamp <= t:
                yield "imu", imu[i]
                i += 1
            yield "frame", k
        while i < len(imu):
            yield "imu", imu[i]
            i += 1


def _read_csv(path: Path, min_cols: int):
    if not path.exists():
        raise DatasetError(f"missing file {path}")
    rows = []
    with path.open(newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].lstrip().startswith("#"):
                continue
            if len(row) < min_cols:
                raise DatasetError(f"{path}:{lineno}: expected >= {min_cols} columns")
            rows.append((lineno, [c.strip() for c in row]))
    return rows


def read_imu_csv(path) -> list:
    """ASL imu0 rows: ``timestamp[ns], w_x, w_y, w_z, a_x, a_y, a_z``."""
    path = Path(path)
    out = []
    for lineno, row in _read_csv(path, 7):
        try:
            t = int(row[0]) * 1e-9
            vals = [float(v) for v in row[1:7]]
        except ValueError as exc:
            raise DatasetError(f"{path}:{lineno}: unparsable row") from exc
        out.append(ImuSample(t, np.array(vals[:3]), np.array(vals[3:6])))
    for a, b in zip(out, out[1:]):
        if b.timestamp <= a.timestamp:
            raise DatasetError(f"{path}: IMU timestamps not strictly increasing at {b.timestamp}")
    return out


def read_camera_csv(path):
    """ASL cam rows: ``timestamp[ns], filename``; returns (ns array, filenames)."""
    path = Path(path)
    ts, names = [], []
    for lineno, row in _read_csv(path, 2):
        try:
            ts.append(int(row[0]))
        except ValueError as exc:
            raise DatasetError(f"{path}:{lineno}: unparsable timestamp") from exc
        names.append(row[1])
    return np.array(ts, dtype=np.int64), names


def read_groundtruth_csv(path) -> Trajectory:
    """``timestamp, p_x, p_y, p_z, q_w, q_x, q_y, q_z, ...`` (body-to-world)."""
    path = Path(path)
    t, p, q = [], [], []
    for lineno, row in _read_csv(path, 8):
        try:
            t.append(int(row[0]) * 1e-9)
            p.append([float(v) for v in row[1:4]])
            q.append([float(v) for v in row[4:8]])
        except ValueError as exc:
            raise DatasetError(f"{path}:{lineno}: unparsable row") from exc
    return Trajectory(np.array(t), np.array(p), np.array(q))


def read_tracks(path, n_frames: Optional[int] = None) -> list:
    """Rows ``frame_id track_id lx ly [rx ry]``; returns one FrameObservations per frame."""
    path = Path(path)
    by_frame: dict = {}
    stereo = None
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) not in (4, 6):
            raise DatasetError(f"{path}:{lineno}: expected 4 or 6 columns, got {len(parts)}")
        if stereo is None:
            stereo = len(parts) == 6
        elif stereo != (len(parts) == 6):
            raise DatasetError(f"{path}:{lineno}: mixed mono/stereo rows")
        try:
            f, j = int(parts[0]), int(parts[1])
            vals = [float(v) for v in parts[2:]]
        except ValueError as exc:
            raise DatasetError(f"{path}:{lineno}: unparsable row") from exc
        by_frame.setdefault(f, []).append((j, vals))
    if n_frames is None:
        n_frames = max(by_frame, default=-1) + 1
    frames = []
    for f in range(n_frames):
        rows = by_frame.get(f, [])
        ids = np.array([r[0] for r in rows], dtype=int)
        vals = np.array([r[1] for r in rows], dtype=float).reshape(len(rows), 4 if stereo else 2)
        frames.append(FrameObservations(f, ids, vals[:, :2], vals[:, 2:4] if stereo else None))
    return frames


def write_tracks(path, frames) -> None:
    lines = ["# frame_id track_id lx ly [rx ry]"]
    for fo in frames:
        for k, j in enumerate(fo.ids):
            row = [f"{fo.frame_index}", f"{int(j)}", f"{fo.left[k, 0]:.6f}", f"{fo.left[k, 1]:.6f}"]
            if fo.right is not None:
                row += [f"{fo.right[k, 0]:.6f}", f"{fo.right[k, 1]:.6f}"]
            lines.append(" ".join(row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_gray(path) -> np.ndarray:
    """Decode an 8-bit grayscale PNG/PGM (colour images are converted)."""
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def load_euroc(directory, stereo: bool = True, time_shift: float = 0.0) -> Sequence:
    """Load an ASL-layout sequence. ``tracks.txt`` next to ``mav0`` replaces image input."""
    root = Path(directory)
    mav = root / "mav0"
    if not mav.is_dir():
        raise DatasetError(f"{root}: no mav0 directory")
    imu = read_imu_csv(mav / "imu0" / "data.csv")
    ts0, names0 = read_camera_csv(mav / "cam0" / "data.csv")
    notes = []
    tracks_file = root / "tracks.txt"
    paths = None
    if stereo:
        cam1 = mav / "cam1"
        if not cam1.is_dir():
            raise DatasetError(f"{root}: stereo configuration but {cam1} is missing")
        ts1, names1 = read_camera_csv(cam1 / "data.csv")
        common, i0, i1 = np.intersect1d(ts0, ts1, return_indices=True)
        if len(common) < len(ts0):
            notes.append(f"dropped {len(ts0) - len(common)} unpaired stereo frames")
        ts = common
        if not tracks_file.exists():
            paths = [(mav / "cam0" / "data" / names0[a], mav / "cam1" / "data" / names1[b])
                     for a, b in zip(i0, i1)]
    else:
        ts = ts0
        if not tracks_file.exists():
            paths = [(mav / "cam0" / "data" / n, None) for n in names0]
    frame_times = ts * 1e-9 + time_shift
    tracks = None
    if tracks_file.exists():
        tracks = read_tracks(tracks_file, len(ts0))
        if len(ts) != len(ts0):
            keep = np.isin(ts0, ts)
            tracks = [t for t, k in zip(tracks, keep) if k]
        if not stereo:
            tracks = [FrameObservations(t.frame_index, t.ids, t.left, None) for t in tracks]
        for k, t in enumerate(tracks):
            t.frame_index = k
    gaps = np.flatnonzero(np.diff(frame_times) > 1.5 * np.median(np.diff(frame_times))) \
        if len(frame_times) > 2 else []
    if len(gaps):
        notes.append(f"{len(gaps)} camera frame gaps")
    gt = None
    gt_path = mav / "state_groundtruth_estimate0" / "data.csv"
    if gt_path.exists():
        gt = read_groundtruth_csv(gt_path)
    return Sequence(imu, frame_times, None, tracks, paths, gt, root.name, notes)


def write_asl_directory(directory, seq: Sequence, calibration_toml: Optional[str] = None) -> Path:
    """Write a sequence with precomputed tracks in ASL layout (+ tracks.txt, calibration.toml)."""
    root = Path(directory)
    mav = root / "mav0"
    for sub in ("imu0", "cam0", "cam1", "state_groundtruth_estimate0"):
        (mav / sub).mkdir(parents=True, exist_ok=True)
    with (mav / "imu0" / "data.csv").open("w") as fh:
        fh.write("#timestamp [ns],w_RS_S_x,w_RS_S_y,w_RS_S_z,a_RS_S_x,a_RS_S_y,a_RS_S_z\n")
        for s in seq.imu:
            fh.write(f"{int(round(s.timestamp * 1e9))}," + ",".join(f"{v:.12g}" for v in s.gyro)
                     + "," + ",".join(f"{v:.12g}" for v in s.accel) + "\n")
    ns = [int(round(t * 1e9)) for t in seq.frame_times]
    for cam in ("cam0", "cam1"):
        with (mav / cam / "data.csv").open("w") as fh:
            fh.write("#timestamp [ns],filename\n")
            fh.writelines(f"{t},{t}.png\n" for t in ns)
    if seq.ground_truth is not None:
        gt = seq.ground_truth
        with (mav / "state_groundtruth_estimate0" / "data.csv").open("w") as fh:
            fh.write("#timestamp,p_x,p_y,p_z,q_w,q_x,q_y,q_z\n")
            for k in range(len(gt)):
                fh.write(f"{int(round(gt.times[k] * 1e9))},"
                         + ",".join(f"{v:.12g}" for v in (*gt.positions[k], *gt.quaternions[k]))
                         + "\n")
    if seq.tracks is not None:
        write_tracks(root / "tracks.txt", seq.tracks)
    if calibration_toml is not None:
        (root / "calibration.toml").write_text(calibration_toml)
    return root
