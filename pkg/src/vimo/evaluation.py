"""Trajectory alignment, absolute trajectory error and relative yaw error."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .so3 import matrix_to_quat, quat_conjugate, wrap_angle
from .trajectory import Trajectory


class AssociationError(ValueError):
    pass


class DegenerateAlignmentError(ValueError):
    pass


@dataclass(frozen=True)
class AlignmentResult:
    """ref ~= scale * rotation @ est + translation."""
    scale: float
    rotation: np.ndarray
    translation: np.ndarray
    mode: str

    def apply(self, p: np.ndarray) -> np.ndarray:
        return self.scale * p @ self.rotation.T + self.translation


class AteResult(NamedTuple):
    rmse_trans: float
    rmse_rot: float        # degrees, geodesic
    alignment: AlignmentResult
    n_pairs: int


def associate(a: Trajectory, b: Trajectory, max_dt: float = 0.01) -> list[tuple[int, int]]:
    """Nearest-timestamp matching; each pose is used at most once."""
    if not max_dt > 0:
        raise ValueError("max_dt must be positive")
    if len(a) == 0 or len(b) == 0:
        raise AssociationError("empty trajectory")
    j = np.clip(np.searchsorted(b.t, a.t), 1, len(b) - 1) if len(b) > 1 else np.zeros(len(a), int)
    if len(b) > 1:
        left_closer = np.abs(a.t - b.t[j - 1]) <= np.abs(a.t - b.t[j])
        j = np.where(left_closer, j - 1, j)
    dt = np.abs(a.t - b.t[j])
    order = np.argsort(dt, kind="stable")
    used_b = set()
    pairs = []
    for i in order:
        if dt[i] > max_dt:
            break
        if j[i] not in used_b:
            used_b.add(int(j[i]))
            pairs.append((int(i), int(j[i])))
    if not pairs:
        raise AssociationError(f"no timestamps matched within {max_dt} s")
    return sorted(pairs)


def umeyama_align(est_p: np.ndarray, ref_p: np.ndarray, mode: str = "sim3") -> AlignmentResult:
    """Closed-form least-squares similarity (sim3) or rigid (se3) alignment."""
    est_p = np.asarray(est_p, dtype=float)
    ref_p = np.asarray(ref_p, dtype=float)
    if mode == "none":
        return AlignmentResult(1.0, np.eye(3), np.zeros(3), mode)
    if mode not in ("sim3", "se3"):
        raise ValueError(f"unknown alignment mode {mode!r}")
    if len(est_p) < 3:
        raise DegenerateAlignmentError("need at least 3 position pairs")
    if np.array_equal(est_p, ref_p):
        return AlignmentResult(1.0, np.eye(3), np.zeros(3), mode)
    mu_e, mu_r = est_p.mean(axis=0), ref_p.mean(axis=0)
    E, Rf = est_p - mu_e, ref_p - mu_r
    sv = np.linalg.svd(E, compute_uv=False)
    if sv[0] == 0.0 or sv[1] < 1e-9 * sv[0]:
        raise DegenerateAlignmentError("positions are coincident or collinear")
    cov = Rf.T @ E / len(E)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    scale = 1.0
    if mode == "sim3":
        scale = float(np.trace(np.diag(D) @ S) / (E * E).sum(axis=1).mean())
    t = mu_r - scale * R @ mu_e
    return AlignmentResult(scale, R, t, mode)


def _paired(est: Trajectory, ref: Trajectory, max_dt: float):
    pairs = np.array(associate(est, ref, max_dt))
    return est.subset(pairs[:, 0]), ref.subset(pairs[:, 1])


def ate(est: Trajectory, ref: Trajectory, mode: str = "sim3", max_dt: float = 0.01) -> AteResult:
    """Translation RMSE [m] and geodesic rotation RMSE [deg] after alignment."""
    e, r = _paired(est, ref, max_dt)
    al = umeyama_align(e.p, r.p, mode)
    dp = al.apply(e.p) - r.p
    rmse_t = float(np.sqrt((dp * dp).sum(axis=1).mean()))
    # geodesic angle of q_ref^-1 (q_align q_est); exactly zero for identical poses
    qa = matrix_to_quat(al.rotation)
    ang = np.array([quat_angle(_qmul(quat_conjugate(r.q[i]), _qmul(qa, e.q[i])))
                    for i in range(len(e))])
    rmse_r = float(np.degrees(np.sqrt((ang * ang).mean())))
    return AteResult(rmse_t, rmse_r, al, len(e))


def _qmul(a, b):
    # plain Hamilton product; no renormalization so q^-1 q has an exactly zero vector part
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    # terms grouped in pairs that cancel exactly when a is the conjugate of b
    return np.array([aw * bw - (ax * bx + ay * by + az * bz),
                     (aw * bx + ax * bw) + (ay * bz - az * by),
                     (aw * by + ay * bw) + (az * bx - ax * bz),
                     (aw * bz + az * bw) + (ax * by - ay * bx)])


def quat_angle(q: np.ndarray) -> float:
    """Rotation angle of a unit quaternion in [0, pi]."""
    return float(2.0 * np.arctan2(np.linalg.norm(q[1:]), abs(q[0])))


def headings(traj: Trajectory) -> np.ndarray:
    """Yaw of the body x axis projected on the world horizontal plane."""
    R = traj.rotations()
    return np.arctan2(R[:, 1, 0], R[:, 0, 0])


@dataclass(frozen=True)
class SegmentStats:
    length: float
    mean: float     # degrees
    median: float
    rmse: float
    count: int


def rpe_yaw(est: Trajectory, ref: Trajectory, segment_lengths: Sequence[float],
            max_dt: float = 0.01) -> list[SegmentStats]:
    """Relative heading error over path segments of fixed length (ref distance)."""
    e, r = _paired(est, ref, max_dt)
    dist = r.path_length()
    ye, yr = headings(e), headings(r)
    out = []
    for d in segment_lengths:
        if d <= 0 or d > dist[-1]:
            raise ValueError(f"segment length {d} m outside (0, {dist[-1]:.3f}] m path")
        ends = np.searchsorted(dist, dist + d - 1e-9)
        starts = np.flatnonzero(ends < len(dist))
        ends = ends[starts]
        err = np.abs(wrap_angle((ye[ends] - ye[starts]) - (yr[ends] - yr[starts])))
        err = np.degrees(err)
        out.append(SegmentStats(float(d), float(err.mean()), float(np.median(err)),
                                float(np.sqrt((err * err).mean())), len(err)))
    return out


def final_yaw_error(est: Trajectory, ref: Trajectory, max_dt: float = 0.01) -> float:
    """Absolute heading difference at the last associated pose, degrees."""
    e, r = _paired(est, ref, max_dt)
    return float(np.degrees(abs(wrap_angle(headings(e)[-1] - headings(r)[-1]))))
