"""Rotation kernels: SO(3) exp/log, Hamilton quaternions (w, x, y, z).

Quaternions are plain ``numpy`` arrays of shape (4,) stored w-first.
Normalized quaternions are kept in the canonical hemisphere ``w >= 0``.
"""
from __future__ import annotations

import math

import numpy as np

SMALL_ANGLE = 1e-8


class InvalidRotationError(ValueError):
    """Raised when a matrix is not a proper rotation."""


def skew(v: np.ndarray) -> np.ndarray:
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def exp_so3(omega: np.ndarray) -> np.ndarray:
    """Rodrigues formula with a 2nd-order Taylor branch near zero."""
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega)
    K = skew(omega)
    if theta < SMALL_ANGLE:
        return np.eye(3) + K + 0.5 * K @ K
    return (np.eye(3) + np.sin(theta) / theta * K
            + (1.0 - np.cos(theta)) / theta**2 * K @ K)


def check_rotation(R: np.ndarray, tol: float = 1e-6) -> None:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.all(np.isfinite(R)):
        raise InvalidRotationError("rotation must be a finite 3x3 matrix")
    if np.abs(R.T @ R - np.eye(3)).max() > tol or np.linalg.det(R) < 0.0:
        raise InvalidRotationError("matrix is not orthonormal with det +1")


def log_so3(R: np.ndarray) -> np.ndarray:
    """Principal logarithm, magnitude in [0, pi].

    Goes through the quaternion so both the theta ~ 0 and theta ~ pi
    branches stay well conditioned.
    """
    check_rotation(R)
    return quat_log(matrix_to_quat(R))


def right_jacobian(phi: np.ndarray) -> np.ndarray:
    """Jr(phi) with Exp(phi + d) ~= Exp(phi) Exp(Jr(phi) d)."""
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-5:
        return np.eye(3) - 0.5 * K + K @ K / 6.0
    return (np.eye(3) - (1.0 - np.cos(theta)) / theta**2 * K
            + (theta - np.sin(theta)) / theta**3 * K @ K)


def right_jacobian_inv(phi: np.ndarray) -> np.ndarray:
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < 1e-5:
        return np.eye(3) + 0.5 * K + K @ K / 12.0
    coef = 1.0 / theta**2 - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta))
    return np.eye(3) + 0.5 * K + coef * K @ K


# ---------------------------------------------------------------- quaternions

def quat_identity() -> np.ndarray:
    return np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = math.sqrt(q @ q)
    if not math.isfinite(n) or n == 0.0:
        raise ValueError("cannot normalize a zero or non-finite quaternion")
    q = q / n
    return -q if q[0] < 0.0 else q


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a ⊗ b, renormalized to the canonical hemisphere."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    q = np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])
    return quat_normalize(q)


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


quat_inverse = quat_conjugate


def quat_exp(omega: np.ndarray) -> np.ndarray:
    """Unit quaternion of the rotation vector ``omega``."""
    omega = np.asarray(omega, dtype=float)
    theta = math.sqrt(omega @ omega)
    if theta < SMALL_ANGLE:
        q = np.array([1.0 - theta**2 / 8.0, *(0.5 * omega)])
    else:
        q = np.array([np.cos(0.5 * theta), *(np.sin(0.5 * theta) / theta * omega)])
    return quat_normalize(q)


def quat_log(q: np.ndarray) -> np.ndarray:
    q = quat_normalize(q)
    w, v = q[0], q[1:]
    n = math.sqrt(v @ v)
    if n < SMALL_ANGLE:
        return 2.0 * v / w * (1.0 - n**2 / (3.0 * w**2))
    return 2.0 * np.arctan2(n, w) / n * v


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = quat_normalize(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Shepperd's method: pick the largest diagonal term for stability."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    i = int(np.argmax([tr, R[0, 0], R[1, 1], R[2, 2]]))
    if i == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif i == 1:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif i == 2:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_normalize(np.array(q))


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    return quat_to_matrix(q) @ v


def quat_slerp(a: np.ndarray, b: np.ndarray, s: float) -> np.ndarray:
    """Geodesic interpolation, s in [0, 1]."""
    d = quat_log(quat_multiply(quat_conjugate(a), b))
    return quat_multiply(a, quat_exp(s * d))


# ---------------------------------------------------------------- helpers

def rot_x(angle: float) -> np.ndarray:
    return exp_so3(np.array([angle, 0.0, 0.0]))


def rot_y(angle: float) -> np.ndarray:
    return exp_so3(np.array([0.0, angle, 0.0]))


def rot_z(angle: float) -> np.ndarray:
    return exp_so3(np.array([0.0, 0.0, angle]))


def yaw_of(R: np.ndarray) -> float:
    """Heading of the body x axis projected onto the world horizontal plane."""
    return float(np.arctan2(R[1, 0], R[0, 0]))


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi


def rotation_angle(R: np.ndarray) -> float:
    """Geodesic angle of a rotation, radians."""
    c = np.clip(0.5 * (np.trace(R) - 1.0), -1.0, 1.0)
    # arccos loses precision near 0; use the sine part too.
    s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.arctan2(s, c))


# ---------------------------------------------------------------- batched

def skew_batch(v: np.ndarray) -> np.ndarray:
    """(n, 3) -> (n, 3, 3)."""
    v = np.asarray(v, dtype=float)
    K = np.zeros(v.shape[:-1] + (3, 3))
    K[..., 0, 1], K[..., 0, 2] = -v[..., 2], v[..., 1]
    K[..., 1, 0], K[..., 1, 2] = v[..., 2], -v[..., 0]
    K[..., 2, 0], K[..., 2, 1] = -v[..., 1], v[..., 0]
    return K


def _rodrigues_coefs(theta):
    small = theta < 1e-5
    ts = np.where(small, 1.0, theta)
    sn, cs, t2 = np.sin(ts), np.cos(ts), theta * theta
    a = np.where(small, 1.0 - t2 / 6.0, sn / ts)
    b = np.where(small, 0.5 - t2 / 24.0, (1.0 - cs) / (ts * ts))
    c = np.where(small, 1.0 / 6.0 - t2 / 120.0, (ts - sn) / (ts * ts * ts))
    return a, b, c


def exp_so3_batch(omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    theta = np.linalg.norm(omega, axis=-1)
    a, b, _ = _rodrigues_coefs(theta)
    K = skew_batch(omega)
    return np.eye(3) + a[..., None, None] * K + b[..., None, None] * (K @ K)


def right_jacobian_batch(phi: np.ndarray) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    theta = np.linalg.norm(phi, axis=-1)
    _, b, c = _rodrigues_coefs(theta)
    K = skew_batch(phi)
    return np.eye(3) - b[..., None, None] * K + c[..., None, None] * (K @ K)


def matrix_to_quat_batch(R: np.ndarray) -> np.ndarray:
    """Vectorized Shepperd conversion, (n, 3, 3) -> (n, 4) canonical w >= 0."""
    R = np.asarray(R, dtype=float).reshape(-1, 3, 3)
    r00, r11, r22 = R[:, 0, 0], R[:, 1, 1], R[:, 2, 2]
    tr = r00 + r11 + r22
    case = np.argmax(np.stack([tr, r00, r11, r22], axis=1), axis=1)
    q = np.empty((len(R), 4))
    d21, d02, d10 = R[:, 2, 1] - R[:, 1, 2], R[:, 0, 2] - R[:, 2, 0], R[:, 1, 0] - R[:, 0, 1]
    s01, s02, s12 = R[:, 0, 1] + R[:, 1, 0], R[:, 0, 2] + R[:, 2, 0], R[:, 1, 2] + R[:, 2, 1]
    with np.errstate(invalid="ignore", divide="ignore"):
        s = 2.0 * np.sqrt(np.maximum(np.choose(case, [1.0 + tr, 1.0 + r00 - r11 - r22,
                                                       1.0 + r11 - r00 - r22,
                                                       1.0 + r22 - r00 - r11]), 0.0))
        cols = [
            np.stack([0.25 * s, d21 / s, d02 / s, d10 / s], axis=1),
            np.stack([d21 / s, 0.25 * s, s01 / s, s02 / s], axis=1),
            np.stack([d02 / s, s01 / s, 0.25 * s, s12 / s], axis=1),
            np.stack([d10 / s, s02 / s, s12 / s, 0.25 * s], axis=1),
        ]
    for k in range(4):
        m = case == k
        q[m] = cols[k][m]
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q[q[:, 0] < 0.0] *= -1.0
    return q
