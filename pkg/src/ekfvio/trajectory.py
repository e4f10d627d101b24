"""Timestamped pose sequences and their plain-text format.

Row layout: ``timestamp tx ty tz qw qx qy qz [vx vy vz] [p11 p12 p13 p22 p23 p33]``
with the pose being IMU body-to-world and ``qw >= 0``.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .geometry import quat_canonical, quat_to_rotation, rotation_to_quat, RigidTransform

_COV_IDX = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)]


@dataclass
class Trajectory:
    times: np.ndarray                      # (N,)
    positions: np.ndarray                  # (N, 3)
    quaternions: np.ndarray                # (N, 4) body-to-world, [w, x, y, z]
    velocities: Optional[np.ndarray] = None
    position_covariances: Optional[np.ndarray] = None   # (N, 3, 3)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.quaternions = np.asarray(self.quaternions, dtype=float).reshape(-1, 4)
        if len(self.positions) != len(self.times) or len(self.quaternions) != len(self.times):
            raise ValueError("trajectory arrays must have equal length")
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.times)

    def rotations(self) -> np.ndarray:
        return np.stack([quat_to_rotation(q) for q in self.quaternions]) if len(self) else \
            np.zeros((0, 3, 3))

    def pose(self, k: int) -> RigidTransform:
        return RigidTransform(quat_to_rotation(self.quaternions[k]), self.positions[k])

    @classmethod
    def from_poses(cls, times, poses, velocities=None, covariances=None) -> "Trajectory":
        pos = np.array([T.translation for T in poses]).reshape(-1, 3)
        quats = np.array([rotation_to_quat(T.rotation) for T in poses]).reshape(-1, 4)
        return cls(times, pos, quats, velocities, covariances)

    def path_length(self) -> float:
        return float(np.linalg.norm(np.diff(self.positions, axis=0), axis=1).sum())


def write_trajectory(path, traj: Trajectory) -> None:
    rows = []
    for k in range(len(traj)):
        row = [traj.times[k], *traj.positions[k], *quat_canonical(traj.quaternions[k])]
        if traj.velocities is not None:
            row += list(traj.velocities[k])
        if traj.position_covariances is not None:
            if traj.velocities is None:
                raise ValueError("covariance columns require velocity columns")
            C = traj.position_covariances[k]
            row += [C[i, j] for i, j in _COV_IDX]
        rows.append(" ".join(f"{v:.9f}" if i == 0 else f"{v:.9g}" for i, v in enumerate(row)))
    header = "# timestamp tx ty tz qw qx qy qz"
    if traj.velocities is not None:
        header += " vx vy vz"
    if traj.position_covariances is not None:
        header += " p11 p12 p13 p22 p23 p33"
    Path(path).write_text(header + "\n" + "\n".join(rows) + ("\n" if rows else ""))


def read_trajectory(path) -> Trajectory:
    path = Path(path)
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            vals = [float(v) for v in line.replace(",", " ").split()]
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: unparsable row") from exc
        if len(vals) not in (8, 11, 17):
            raise ValueError(f"{path}:{lineno}: expected 8, 11 or 17 columns, got {len(vals)}")
        rows.append(vals)
    if not rows:
        return Trajectory(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 4)))
    width = min(len(r) for r in rows)
    A = np.array([r[:width] for r in rows])
    vel = A[:, 8:11] if width >= 11 else None
    cov = None
    if width >= 17:
        cov = np.zeros((len(A), 3, 3))
        for c, (i, j) in enumerate(_COV_IDX):
            cov[:, i, j] = cov[:, j, i] = A[:, 11 + c]
    return Trajectory(A[:, 0], A[:, 1:4], A[:, 4:8], vel, cov)
