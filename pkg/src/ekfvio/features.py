"""Feature tracks: per-feature pixel/normalized coordinate history."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass
class FeatureTrack:
    """Contiguous observation history of one feature.

    Entries are indexed by camera frame; ``start`` is the oldest frame still
    stored (older entries get trimmed once no trail pose refers to them).
    """

    id: int
    first_frame: int
    start: int = -1
    left_px: list = field(default_factory=list)
    left_norm: list = field(default_factory=list)
    right_px: list = field(default_factory=list)
    right_norm: list = field(default_factory=list)
    last_used: Optional[int] = None
    point: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.start < 0:
            self.start = self.first_frame

    @property
    def last_frame(self) -> int:
        return self.start + len(self.left_px) - 1

    def add(self, frame: int, left_px, left_norm, right_px=None, right_norm=None) -> None:
        if self.left_px and frame != self.last_frame + 1:
            raise ValueError(f"track {self.id}: frame {frame} breaks contiguity")
        self.left_px.append(np.asarray(left_px, dtype=float))
        self.left_norm.append(np.asarray(left_norm, dtype=float))
        self.right_px.append(None if right_px is None else np.asarray(right_px, dtype=float))
        self.right_norm.append(None if right_norm is None else np.asarray(right_norm, dtype=float))

    def has(self, frame: int) -> bool:
        return self.start <= frame <= self.last_frame

    def _at(self, seq, frame):
        return seq[frame - self.start]

    def left_pixel(self, frame: int) -> np.ndarray:
        return self._at(self.left_px, frame)

    def left(self, frame: int) -> np.ndarray:
        return self._at(self.left_norm, frame)

    def right(self, frame: int):
        return self._at(self.right_norm, frame)

    def right_pixel(self, frame: int):
        return self._at(self.right_px, frame)

    def trim_before(self, frame: int) -> None:
        n = frame - self.start
        if n <= 0:
            return
        n = min(n, len(self.left_px) - 1)
        del self.left_px[:n], self.left_norm[:n], self.right_px[:n], self.right_norm[:n]
        self.start += n
