"""Magnetometer model: calibration, relative-orientation residual, alignment.

Calibrated measurements live on the unit sphere (normalized field units),
so the world field has unit norm and ``sigma_m`` is dimensionless.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .so3 import (matrix_to_quat, quat_exp, quat_multiply, quat_to_matrix,
                  right_jacobian, skew)


class MagCalibrationError(ValueError):
    pass


class TooFewSamplesError(MagCalibrationError):
    pass


class InsufficientExcitationError(MagCalibrationError):
    pass


class DegenerateSpreadError(MagCalibrationError):
    pass


class DegenerateAlignmentError(ValueError):
    pass


class MagSample(NamedTuple):
    t: float
    m: np.ndarray


@dataclass(frozen=True)
class MagNoiseParams:
    sigma_m: float = 0.005

    def __post_init__(self):
        if not self.sigma_m > 0:
            raise ValueError("sigma_m must be strictly positive")


@dataclass(frozen=True)
class MagCalibration:
    """Correction m_tilde = A (m_hat - h); A = S^-1 is symmetric positive definite."""
    A: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        h = np.asarray(self.h, dtype=float)
        if A.shape != (3, 3) or h.shape != (3,):
            raise ValueError("A must be 3x3 and h a 3-vector")
        if np.abs(A - A.T).max() > 1e-9:
            raise ValueError("soft-iron matrix A must be symmetric")
        if np.linalg.eigvalsh(A).min() <= 0.0:
            raise ValueError("soft-iron matrix A must be positive definite")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "h", h)

    @classmethod
    def identity(cls) -> "MagCalibration":
        return cls(np.eye(3), np.zeros(3))

    def correct(self, m: np.ndarray) -> np.ndarray:
        """Vectorized correction of an (n, 3) or (3,) array."""
        return (np.asarray(m, dtype=float) - self.h) @ self.A.T


def world_field(inclination_deg: float = 60.0, declination_deg: float = 0.0) -> np.ndarray:
    """Unit ENU field pointing north and down."""
    I, D = np.radians(inclination_deg), np.radians(declination_deg)
    return np.array([np.sin(D) * np.cos(I), np.cos(D) * np.cos(I), -np.sin(I)])


def apply_calibration(raw: MagSample, cal: MagCalibration) -> MagSample:
    return MagSample(raw.t, cal.A @ (np.asarray(raw.m, dtype=float) - cal.h))


def _as_points(samples) -> np.ndarray:
    if isinstance(samples, np.ndarray):
        pts = np.asarray(samples, dtype=float)
    else:
        pts = np.array([s.m if isinstance(s, MagSample) else s for s in samples], dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError("expected an (n, 3) array of field samples")
    return pts


def octant_coverage(directions: np.ndarray) -> int:
    """Number of the 8 sign octants hit by at least one direction."""
    codes = (directions > 0).astype(int) @ np.array([1, 2, 4])
    return len(np.unique(codes))


def _sym_sqrt(M: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    A = (V * np.sqrt(w)) @ V.T
    return 0.5 * (A + A.T)


def fit_ellipsoid(samples, min_samples: int = 100, min_octants: int = 6,
                  min_thickness: float = 0.05) -> MagCalibration:
    """Ellipsoid-specific algebraic fit mapping samples onto the unit sphere.

    Quadric ``x'Qx + 2u'x + d = 0`` solved under the 4J - I^2 = 1 ellipsoid
    constraint (generalized eigenproblem on the scatter matrix). The
    symmetric square root of the normalized quadric is returned as A.
    ``min_thickness`` bounds the ratio of the smallest to the largest
    singular value of the centered samples; noisy planar data otherwise
    fits a spurious sphere.
    """
    pts = _as_points(samples)
    n = len(pts)
    if n < min_samples:
        raise TooFewSamplesError(f"need at least {min_samples} samples, got {n}")
    # work on a well-scaled copy; undo the scaling at the end
    center0 = pts.mean(axis=0)
    scale = np.sqrt(((pts - center0) ** 2).sum(axis=1).mean())
    if not scale > 0:
        raise InsufficientExcitationError("all samples coincide")
    X = (pts - center0) / scale
    sv = np.linalg.svd(X, compute_uv=False)
    if sv[-1] < min_thickness * sv[0]:
        raise InsufficientExcitationError(
            "samples are (nearly) coplanar; rotate the sensor about all three axes")
    x, y, z = X.T
    D = np.column_stack([x * x, y * y, z * z, 2 * y * z, 2 * x * z, 2 * x * y,
                         2 * x, 2 * y, 2 * z, np.ones(n)])
    S = D.T @ D
    S11, S12, S22 = S[:6, :6], S[:6, 6:], S[6:, 6:]
    C1 = np.zeros((6, 6))
    C1[:3, :3] = 1.0
    np.fill_diagonal(C1[:3, :3], -1.0)
    C1[3:, 3:] = -4.0 * np.eye(3)
    try:
        S22_inv_S12T = np.linalg.solve(S22, S12.T)
        M = np.linalg.solve(C1, S11 - S12 @ S22_inv_S12T)
    except np.linalg.LinAlgError as exc:
        raise InsufficientExcitationError("degenerate quadric fit") from exc
    evals, evecs = np.linalg.eig(M)
    evals, evecs = evals.real, evecs.real
    # admissible eigenvectors satisfy the ellipsoid constraint v'C1v > 0;
    # the smallest eigenvalue among them minimizes the algebraic residual
    constraint = np.einsum("ik,ij,jk->k", evecs, C1, evecs)
    ok = np.flatnonzero(constraint > 0)
    if len(ok) == 0:
        raise InsufficientExcitationError("no ellipsoid solution for these samples")
    v1 = evecs[:, ok[np.argmin(np.abs(evals[ok]))]]
    v2 = -S22_inv_S12T @ v1
    a, b, c, f, g, h_, p, q, r, d = np.concatenate([v1, v2])
    Q = np.array([[a, h_, g], [h_, b, f], [g, f, c]])
    u = np.array([p, q, r])
    try:
        center = -np.linalg.solve(Q, u)
    except np.linalg.LinAlgError as exc:
        raise InsufficientExcitationError("singular quadric") from exc
    s = center @ Q @ center - d
    Mq = Q / s
    if np.linalg.eigvalsh(0.5 * (Mq + Mq.T)).min() <= 0.0:
        raise InsufficientExcitationError("fitted quadric is not an ellipsoid")
    A = _sym_sqrt(Mq) / scale
    h = center * scale + center0
    cal = MagCalibration(A, h)
    dirs = cal.correct(pts)
    cover = octant_coverage(dirs)
    if cover < min_octants:
        raise InsufficientExcitationError(
            f"field directions cover {cover}/8 octants (need {min_octants}); "
            "rotate the sensor about all three axes several times")
    return cal


def fit_hard_iron(samples, min_samples: int = 50, min_spread: float = 2e-3) -> MagCalibration:
    """Sphere fit: A is a scaled identity, h the fitted center.

    ``min_spread`` bounds the smallest eigenvalue of the covariance of the
    unit directions seen from the fitted center; below it some component
    of the center is not observable.
    """
    pts = _as_points(samples)
    n = len(pts)
    if n < min_samples:
        raise TooFewSamplesError(f"need at least {min_samples} samples, got {n}")
    mu = pts.mean(axis=0)
    X = pts - mu
    # |x|^2 = 2 c.x + k, written around the sample mean for conditioning
    Dm = np.column_stack([2 * X, np.ones(n)])
    rhs = (X * X).sum(axis=1)
    sol, *_ = np.linalg.lstsq(Dm, rhs, rcond=None)
    c = sol[:3]
    radius2 = sol[3] + c @ c
    if not radius2 > 0:
        raise DegenerateSpreadError("sphere fit failed: non-positive radius")
    center = c + mu
    dirs = pts - center
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    spread = np.linalg.eigvalsh(np.cov(dirs.T)).min()
    if spread < min_spread:
        raise DegenerateSpreadError(
            f"direction spread {spread:.2e} below {min_spread:.0e}; hard-iron offset unobservable")
    return MagCalibration(np.eye(3) / np.sqrt(radius2), center)


# ---------------------------------------------------------------- residuals

def _vec(m) -> np.ndarray:
    return np.asarray(m.m if isinstance(m, MagSample) else m, dtype=float)


def _delta_rotation(gamma_k_j, jac_bg=None, dbg=None):
    """Rotation of the (bias-corrected) preintegrated orientation and phi."""
    if jac_bg is None or dbg is None:
        return quat_to_matrix(gamma_k_j), np.zeros(3)
    phi = np.asarray(jac_bg) @ np.asarray(dbg)
    return quat_to_matrix(quat_multiply(gamma_k_j, quat_exp(phi))), phi


def mag_residual(gamma_k_j, q_WB_k, q_WB_k1, m_j, m_k1, jac_bg=None, dbg=None) -> np.ndarray:
    """R_BW^k R_WB^k1 m^k1 - dR_k^j m^j for calibrated measurements.

    ``jac_bg``/``dbg`` optionally apply the first-order gyro-bias correction
    to the preintegrated rotation.
    """
    dR, _ = _delta_rotation(gamma_k_j, jac_bg, dbg)
    Rk, Rk1 = quat_to_matrix(q_WB_k), quat_to_matrix(q_WB_k1)
    return Rk.T @ Rk1 @ _vec(m_k1) - dR @ _vec(m_j)


def mag_residual_jacobians(gamma_k_j, q_WB_k, q_WB_k1, m_j, m_k1, jac_bg=None, dbg=None):
    """Jacobians w.r.t. (dtheta_k, dtheta_k1, db_g^k), each 3x3."""
    dR, phi = _delta_rotation(gamma_k_j, jac_bg, dbg)
    Rk, Rk1 = quat_to_matrix(q_WB_k), quat_to_matrix(q_WB_k1)
    m_k1 = _vec(m_k1)
    Rrel = Rk.T @ Rk1
    J_k = skew(Rrel @ m_k1)
    J_k1 = -Rrel @ skew(m_k1)
    if jac_bg is None:
        J_bg = np.zeros((3, 3))
    else:
        J_bg = dR @ skew(_vec(m_j)) @ right_jacobian(phi) @ np.asarray(jac_bg)
    return J_k, J_k1, J_bg


def mag_weight(noise: MagNoiseParams) -> np.ndarray:
    """Information matrix: two independent noisy measurements per residual."""
    return np.eye(3) / (2.0 * noise.sigma_m**2)


# ---------------------------------------------------------------- alignment

def initial_alignment(accel_mean, mag_mean, min_angle_deg: float = 5.0) -> np.ndarray:
    """Quaternion q_WB of the body w.r.t. an East-North-Up world frame."""
    a = np.asarray(accel_mean, dtype=float)
    m = np.asarray(mag_mean, dtype=float)
    na, nm = np.linalg.norm(a), np.linalg.norm(m)
    if na == 0.0 or nm == 0.0:
        raise DegenerateAlignmentError("zero accelerometer or magnetometer mean")
    up = a / na
    cross = np.cross(m / nm, up)
    if np.linalg.norm(cross) < np.sin(np.radians(min_angle_deg)):
        raise DegenerateAlignmentError("magnetic field is (nearly) parallel to gravity")
    east = cross / np.linalg.norm(cross)
    north = np.cross(up, east)
    R_WB = np.vstack([east, north, up])
    return matrix_to_quat(R_WB)


# ---------------------------------------------------------------- noise

def allan_deviation(samples, rate: float, taus: Sequence[float]):
    """Overlapping Allan deviation of a uniformly sampled sequence.

    Returns a list of (tau, deviation), tau rounded to whole samples.
    """
    x = np.asarray(samples, dtype=float)
    x = x - x.mean()  # offset-invariant; keeps the cumulative sum well scaled
    n = len(x)
    theta = np.concatenate([[0.0], np.cumsum(x)]) / rate
    out = []
    for tau in taus:
        m = int(round(tau * rate))
        if m < 1 or n < 2 * m:
            raise ValueError(f"tau={tau} s needs at least {max(2 * m, 2)} samples, have {n}")
        t = m / rate
        d = theta[2 * m:] - 2.0 * theta[m:-m] + theta[:-2 * m]
        avar = (d @ d) / (2.0 * t * t * len(d))
        out.append((t, float(np.sqrt(avar))))
    return out
