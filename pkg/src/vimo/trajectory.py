"""Timestamped pose sequences shared by the simulator, estimator and evaluation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .so3 import quat_to_matrix


@dataclass
class Trajectory:
    t: np.ndarray        # (n,)
    p: np.ndarray        # (n, 3)
    q: np.ndarray        # (n, 4) w-first
    v: np.ndarray | None = None  # (n, 3)

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).reshape(-1)
        self.p = np.asarray(self.p, dtype=float).reshape(-1, 3)
        self.q = np.asarray(self.q, dtype=float).reshape(-1, 4)
        if self.v is None:
            self.v = np.zeros_like(self.p)
        self.v = np.asarray(self.v, dtype=float).reshape(-1, 3)
        n = len(self.t)
        if not (len(self.p) == len(self.q) == len(self.v) == n):
            raise ValueError("trajectory arrays have inconsistent lengths")
        if n > 1 and np.any(np.diff(self.t) <= 0):
            raise ValueError("trajectory timestamps must be strictly increasing")
        # rescale only quaternions measurably off the unit sphere so that
        # written and re-read trajectories stay bit-identical
        n = np.linalg.norm(self.q, axis=1)
        if np.any(~np.isfinite(n) | (n == 0)):
            raise ValueError("trajectory quaternions must be finite and non-zero")
        off = np.abs(n - 1.0) > 1e-15
        if np.any(off):
            self.q[off] = self.q[off] / n[off, None]
        self.q[self.q[:, 0] < 0] *= -1.0

    def __len__(self) -> int:
        return len(self.t)

    def rotations(self) -> np.ndarray:
        return np.array([quat_to_matrix(q) for q in self.q]).reshape(-1, 3, 3)

    def path_length(self) -> np.ndarray:
        """Cumulative distance travelled at each sample."""
        steps = np.linalg.norm(np.diff(self.p, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(steps)])

    def subset(self, idx) -> "Trajectory":
        idx = np.asarray(idx)
        return Trajectory(self.t[idx], self.p[idx], self.q[idx], self.v[idx])
