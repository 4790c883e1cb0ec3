"""Pinhole camera factors over ingested feature tracks."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .so3 import check_rotation, skew


class BehindCameraError(ValueError):
    """Landmark is not in front of the camera; the factor should be dropped."""


class InsufficientBaselineError(ValueError):
    pass


@dataclass(frozen=True)
class CameraModel:
    """Pinhole intrinsics plus the camera pose in the body frame.

    ``R_BC``, ``t_BC`` map camera coordinates to body coordinates:
    x_B = R_BC x_C + t_BC.
    """
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    R_BC: np.ndarray = field(default_factory=lambda: np.eye(3))
    t_BC: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx <= self.width and 0 <= self.cy <= self.height):
            raise ValueError("principal point must lie inside the image")
        object.__setattr__(self, "R_BC", np.asarray(self.R_BC, dtype=float))
        object.__setattr__(self, "t_BC", np.asarray(self.t_BC, dtype=float))
        check_rotation(self.R_BC, tol=1e-9)

    @classmethod
    def forward_looking(cls, fx=400.0, fy=400.0, cx=320.0, cy=240.0,
                        width=640, height=480) -> "CameraModel":
        """Camera z along body x (forward), camera x along body -y."""
        R_BC = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
        return cls(fx, fy, cx, cy, width, height, R_BC, np.zeros(3))

    def in_bounds(self, uv) -> np.ndarray:
        uv = np.asarray(uv)
        return ((uv[..., 0] >= 0) & (uv[..., 0] <= self.width)
                & (uv[..., 1] >= 0) & (uv[..., 1] <= self.height))


@dataclass
class Landmark:
    id: int
    l_W: np.ndarray
    status: str = "active"  # active | marginalized | dropped


class FeatureObservation(NamedTuple):
    frame_id: int
    landmark_id: int
    uv: np.ndarray
    sigma_px: float = 1.0


def _pose(T):
    """Accept a SystemState-like object or an (R_WB, p_WB) pair."""
    if hasattr(T, "R") and hasattr(T, "p"):
        return T.R, np.asarray(T.p, dtype=float)
    R, p = T
    return np.asarray(R, dtype=float), np.asarray(p, dtype=float)


def to_camera(cam: CameraModel, T_WB, l_W) -> np.ndarray:
    R, p = _pose(T_WB)
    return cam.R_BC.T @ (R.T @ (np.asarray(l_W, dtype=float) - p) - cam.t_BC)


def project(cam: CameraModel, T_WB, l_W, min_depth: float = 1e-6) -> np.ndarray:
    x, y, z = to_camera(cam, T_WB, l_W)
    if z <= min_depth:
        raise BehindCameraError(f"landmark depth {z:.3g} m")
    return np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy])


def unproject(cam: CameraModel, T_WB, uv):
    """World-frame ray (origin, unit direction) through pixel ``uv``."""
    R, p = _pose(T_WB)
    d_C = np.array([(uv[0] - cam.cx) / cam.fx, (uv[1] - cam.cy) / cam.fy, 1.0])
    d_W = R @ cam.R_BC @ d_C
    return p + R @ cam.t_BC, d_W / np.linalg.norm(d_W)


def reprojection_residual(obs: FeatureObservation, cam: CameraModel, T_WB, l_W) -> np.ndarray:
    return project(cam, T_WB, l_W) - np.asarray(obs.uv, dtype=float)


def reprojection_jacobians(cam: CameraModel, T_WB, l_W):
    """(J_pose 2x6 over [dp, dtheta], J_landmark 2x3), right perturbation."""
    R, p = _pose(T_WB)
    p_B = R.T @ (np.asarray(l_W, dtype=float) - p)
    x, y, z = cam.R_BC.T @ (p_B - cam.t_BC)
    if z <= 1e-6:
        raise BehindCameraError(f"landmark depth {z:.3g} m")
    dpi = np.array([[cam.fx / z, 0.0, -cam.fx * x / z**2],
                    [0.0, cam.fy / z, -cam.fy * y / z**2]])
    A = dpi @ cam.R_BC.T
    J_pose = np.hstack([-A @ R.T, A @ skew(p_B)])
    return J_pose, A @ R.T


def project_batch(cam: CameraModel, R_WB: np.ndarray, p_WB: np.ndarray, l_W: np.ndarray):
    """Vectorized projection and Jacobians for n observations.

    Returns (uv (n,2), J_pose (n,2,6), J_landmark (n,2,3), depth (n,)).
    """
    d = l_W - p_WB
    p_B = np.einsum("nji,nj->ni", R_WB, d)
    p_C = (p_B - cam.t_BC) @ cam.R_BC
    x, y, z = p_C.T
    zs = np.where(np.abs(z) > 1e-9, z, 1e-9)
    uv = np.column_stack([cam.fx * x / zs + cam.cx, cam.fy * y / zs + cam.cy])
    n = len(z)
    dpi = np.zeros((n, 2, 3))
    dpi[:, 0, 0] = cam.fx / zs
    dpi[:, 0, 2] = -cam.fx * x / zs**2
    dpi[:, 1, 1] = cam.fy / zs
    dpi[:, 1, 2] = -cam.fy * y / zs**2
    A = dpi @ cam.R_BC.T
    J_l = np.einsum("nij,nkj->nik", A, R_WB)  # A @ R^T
    pB_skew = np.zeros((n, 3, 3))
    pB_skew[:, 0, 1], pB_skew[:, 0, 2] = -p_B[:, 2], p_B[:, 1]
    pB_skew[:, 1, 0], pB_skew[:, 1, 2] = p_B[:, 2], -p_B[:, 0]
    pB_skew[:, 2, 0], pB_skew[:, 2, 1] = -p_B[:, 1], p_B[:, 0]
    J_pose = np.concatenate([-J_l, A @ pB_skew], axis=2)
    return uv, J_pose, J_l, z


class TriangulationResult(NamedTuple):
    point: np.ndarray
    max_reproj_px: float
    parallax_deg: float
    low_quality: bool


def triangulate(observations: Sequence, cam: CameraModel, min_baseline: float = 0.01,
                max_reproj_px: float = 5.0) -> TriangulationResult:
    """Midpoint triangulation from (FeatureObservation, T_WB) pairs."""
    if len(observations) < 2:
        raise InsufficientBaselineError("need at least two observations")
    origins, dirs = [], []
    for obs, T in observations:
        o, d = unproject(cam, T, obs.uv)
        origins.append(o)
        dirs.append(d)
    origins, dirs = np.array(origins), np.array(dirs)
    baseline = np.max(np.linalg.norm(origins - origins[0], axis=1))
    if baseline < min_baseline:
        raise InsufficientBaselineError(f"baseline {baseline:.3g} m below {min_baseline} m")
    P = np.eye(3)[None] - dirs[:, :, None] * dirs[:, None, :]
    H = P.sum(axis=0)
    b = np.einsum("nij,nj->i", P, origins)
    X = np.linalg.lstsq(H, b, rcond=None)[0]
    cosines = np.clip(dirs @ dirs.T, -1.0, 1.0)
    parallax = float(np.degrees(np.arccos(cosines.min())))
    well_posed = np.linalg.eigvalsh(H)[0] / len(dirs) > 1e-6
    worst = 0.0
    for obs, T in observations:
        try:
            worst = max(worst, float(np.linalg.norm(project(cam, T, X) - obs.uv)))
        except BehindCameraError:
            worst = np.inf
    low = (not well_posed) or not (worst < max_reproj_px)
    return TriangulationResult(X, worst, parallax, low)
