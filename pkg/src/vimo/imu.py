"""IMU preintegration between keyframes and the inertial residual.

Preintegrated terms live in the body frame of the first keyframe and are
independent of its world-frame state. Error-state ordering for the
covariance and residual is ``[alpha, beta, theta, b_g, b_a]``; the state
tangent ordering used by Jacobians is ``[p, theta, v, b_g, b_a]``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np

from .so3 import (exp_so3_batch, matrix_to_quat_batch, quat_conjugate, quat_exp,
                  quat_identity, quat_log, quat_multiply, quat_slerp, quat_to_matrix,
                  right_jacobian, right_jacobian_batch, skew, skew_batch)

GRAVITY = np.array([0.0, 0.0, -9.80665])

# residual / preintegration error-state slices
ALPHA, BETA, THETA, BG, BA = (slice(0, 3), slice(3, 6), slice(6, 9),
                              slice(9, 12), slice(12, 15))
# state tangent slices
SP, SQ, SV, SBG, SBA = (slice(0, 3), slice(3, 6), slice(6, 9),
                        slice(9, 12), slice(12, 15))


class ImuOrderError(ValueError):
    """Non-increasing timestamps in an IMU stream."""


class RepropagationRequired(Exception):
    """Bias moved too far from the linearization point for a first-order fix."""


class ImuSample(NamedTuple):
    t: float
    gyro: np.ndarray
    accel: np.ndarray


@dataclass(frozen=True)
class ImuNoiseParams:
    """Continuous-time noise densities.

    sigma_g [rad/s/sqrt(Hz)], sigma_a [m/s^2/sqrt(Hz)], sigma_bg
    [rad/s^2/sqrt(Hz)], sigma_ba [m/s^3/sqrt(Hz)], rate [Hz].
    """
    sigma_g: float = 1.7e-4
    sigma_a: float = 2.0e-3
    sigma_bg: float = 1.9e-5
    sigma_ba: float = 3.0e-3
    rate: float = 200.0

    def __post_init__(self):
        for name in ("sigma_g", "sigma_a", "sigma_bg", "sigma_ba", "rate"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")


@dataclass(frozen=True)
class SystemState:
    p: np.ndarray
    q: np.ndarray
    v: np.ndarray
    bg: np.ndarray
    ba: np.ndarray
    t: float = 0.0

    @classmethod
    def identity(cls, t: float = 0.0) -> "SystemState":
        z = np.zeros(3)
        return cls(z, quat_identity(), z, z, z, t)

    @cached_property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.q)

    def retract(self, delta: np.ndarray) -> "SystemState":
        """x ⊞ delta with delta = [dp, dtheta, dv, dbg, dba], right perturbation."""
        return replace(
            self,
            p=self.p + delta[SP],
            q=quat_multiply(self.q, quat_exp(delta[SQ])),
            v=self.v + delta[SV],
            bg=self.bg + delta[SBG],
            ba=self.ba + delta[SBA],
        )

    def boxminus(self, other: "SystemState") -> np.ndarray:
        """Tangent vector d with other ⊞ d = self."""
        return np.concatenate([
            self.p - other.p,
            quat_log(quat_multiply(quat_conjugate(other.q), self.q)),
            self.v - other.v,
            self.bg - other.bg,
            self.ba - other.ba,
        ])


def _bias_jacobian_init() -> np.ndarray:
    J = np.zeros((15, 6))
    J[BG, 0:3] = np.eye(3)
    J[BA, 3:6] = np.eye(3)
    return J


@dataclass
class PreintegratedImu:
    """Accumulated alpha, beta, gamma with covariance and bias Jacobians.

    ``jac`` is 15x6: derivative of the error state w.r.t. ``[b_g, b_a]`` at
    the linearization biases. The raw samples are retained so the whole
    interval can be repropagated when the bias estimate moves too far.
    Per-sample checkpoints of gamma and its gyro-bias Jacobian serve the
    magnetometer factors.
    """
    bg_lin: np.ndarray
    ba_lin: np.ndarray
    noise: ImuNoiseParams
    t0: float | None = None
    alpha: np.ndarray = field(default_factory=lambda: np.zeros(3))
    beta: np.ndarray = field(default_factory=lambda: np.zeros(3))
    gamma: np.ndarray = field(default_factory=quat_identity)
    cov: np.ndarray = field(default_factory=lambda: np.zeros((15, 15)))
    jac: np.ndarray = field(default_factory=_bias_jacobian_init)
    dt_total: float = 0.0
    checkpoint_t: np.ndarray = field(default_factory=lambda: np.zeros(0))
    checkpoint_gamma: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    checkpoint_jac: np.ndarray = field(default_factory=lambda: np.zeros((0, 3, 3)))
    sample_t: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sample_gyro: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    sample_accel: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        self.bg_lin = np.asarray(self.bg_lin, dtype=float).copy()
        self.ba_lin = np.asarray(self.ba_lin, dtype=float).copy()

    @property
    def t1(self) -> float:
        return self.t0 + self.dt_total

    @property
    def samples(self) -> list:
        return [ImuSample(t, w, a) for t, w, a in
                zip(self.sample_t, self.sample_gyro, self.sample_accel)]

    @property
    def gamma_checkpoints(self) -> list:
        return list(zip(self.checkpoint_t, self.checkpoint_gamma))

    def integrate(self, s0: ImuSample, s1: ImuSample) -> None:
        """Midpoint step over [s0.t, s1.t]; mutates in place."""
        self.integrate_arrays(np.array([s0.t, s1.t]), np.array([s0.gyro, s1.gyro]),
                              np.array([s0.accel, s1.accel]))

    def integrate_arrays(self, t, gyro, accel) -> None:
        """Integrate consecutive samples; ``t[0]`` must continue the interval."""
        t = np.asarray(t, dtype=float)
        gyro = np.asarray(gyro, dtype=float).reshape(-1, 3)
        accel = np.asarray(accel, dtype=float).reshape(-1, 3)
        n = len(t) - 1
        if n < 1:
            return
        dt = np.diff(t)
        if not np.all(dt > 0.0):
            k = int(np.argmax(~(dt > 0.0)))
            raise ImuOrderError(f"IMU timestamps not increasing: {t[k]} -> {t[k + 1]}")
        if self.t0 is None:
            self.t0 = float(t[0])
            self.sample_t, self.sample_gyro, self.sample_accel = t[:1], gyro[:1], accel[:1]
        elif abs(t[0] - self.t1) > 1e-9:
            raise ImuOrderError(f"sample at {t[0]} does not continue interval ending {self.t1}")
        self.sample_t = np.concatenate([self.sample_t, t[1:]])
        self.sample_gyro = np.concatenate([self.sample_gyro, gyro[1:]])
        self.sample_accel = np.concatenate([self.sample_accel, accel[1:]])

        nz = self.noise
        dtc = dt[:, None]
        phi = (0.5 * (gyro[:-1] + gyro[1:]) - self.bg_lin) * dtc
        dR = exp_so3_batch(phi)
        Jr = right_jacobian_batch(phi)
        R = np.empty((n + 1, 3, 3))
        R[0] = quat_to_matrix(self.gamma)
        for i in range(n):
            R[i + 1] = R[i] @ dR[i]
        a = accel - self.ba_lin
        R0, R1 = R[:-1], R[1:]
        a_mid = 0.5 * (np.einsum("nij,nj->ni", R0, a[:-1]) + np.einsum("nij,nj->ni", R1, a[1:]))

        dbeta = a_mid * dtc
        beta_prev = self.beta + np.concatenate([np.zeros((1, 3)), np.cumsum(dbeta, axis=0)[:-1]])
        self.alpha = self.alpha + (beta_prev * dtc + 0.5 * a_mid * dtc**2).sum(axis=0)
        self.beta = self.beta + dbeta.sum(axis=0)
        self.dt_total += float(t[-1] - t[0])

        # linearized error-state transition per step
        S0, S1 = skew_batch(a[:-1]), skew_batch(a[1:])
        dRt = np.transpose(dR, (0, 2, 1))
        dA_th = -0.5 * (R0 @ S0 + R1 @ S1 @ dRt)
        dA_bg = 0.5 * (R1 @ S1 @ Jr) * dt[:, None, None]
        dA_ba = -0.5 * (R0 + R1)
        h = (0.5 * dt * dt)[:, None, None]
        d3 = dt[:, None, None]
        F = np.broadcast_to(np.eye(15), (n, 15, 15)).copy()
        F[:, ALPHA, BETA] = np.eye(3) * d3
        F[:, ALPHA, THETA] = h * dA_th
        F[:, ALPHA, BG] = h * dA_bg
        F[:, ALPHA, BA] = h * dA_ba
        F[:, BETA, THETA] = d3 * dA_th
        F[:, BETA, BG] = d3 * dA_bg
        F[:, BETA, BA] = d3 * dA_ba
        F[:, THETA, THETA] = dRt
        F[:, THETA, BG] = -Jr * d3

        # white measurement noise enters exactly like a bias perturbation
        Gg, Ga = F[:, :9, BG], F[:, :9, BA]
        Q = (Gg @ np.transpose(Gg, (0, 2, 1))) * (nz.sigma_g**2 / d3) \
            + (Ga @ np.transpose(Ga, (0, 2, 1))) * (nz.sigma_a**2 / d3)
        Qf = np.zeros((n, 15, 15))
        Qf[:, :9, :9] = Q
        i3 = np.arange(3)
        Qf[:, 9 + i3, 9 + i3] = (nz.sigma_bg**2 * dt)[:, None]
        Qf[:, 12 + i3, 12 + i3] = (nz.sigma_ba**2 * dt)[:, None]
        Ft = np.transpose(F, (0, 2, 1))

        cov, jac = self.cov, self.jac
        jacs = np.empty((n, 15, 6))
        for i in range(n):
            cov = F[i] @ cov @ Ft[i] + Qf[i]
            jac = F[i] @ jac
            jacs[i] = jac
        cov = 0.5 * (cov + cov.T)
        jac_th = jacs[:, THETA, 0:3]
        self.cov, self.jac = cov, jac

        gam = matrix_to_quat_batch(R[1:])
        self.gamma = gam[-1]
        self.checkpoint_t = np.concatenate([self.checkpoint_t, t[1:]])
        self.checkpoint_gamma = np.concatenate([self.checkpoint_gamma, gam])
        self.checkpoint_jac = np.concatenate([self.checkpoint_jac, jac_th])

    def repropagate(self, bg: np.ndarray, ba: np.ndarray) -> None:
        """Redo the integration from the stored samples with new biases."""
        fresh = PreintegratedImu(bg, ba, self.noise)
        fresh.integrate_arrays(self.sample_t, self.sample_gyro, self.sample_accel)
        self.__dict__.update(fresh.__dict__)

    def corrected(self, bg: np.ndarray, ba: np.ndarray):
        """First-order bias-corrected (alpha, beta, gamma); never raises."""
        dbg = np.asarray(bg) - self.bg_lin
        dba = np.asarray(ba) - self.ba_lin
        alpha = self.alpha + self.jac[ALPHA, 0:3] @ dbg + self.jac[ALPHA, 3:6] @ dba
        beta = self.beta + self.jac[BETA, 0:3] @ dbg + self.jac[BETA, 3:6] @ dba
        gamma = quat_multiply(self.gamma, quat_exp(self.jac[THETA, 0:3] @ dbg))
        return alpha, beta, gamma

    def gamma_at(self, t: float):
        """Preintegrated rotation over [t0, t] and its gyro-bias Jacobian."""
        ts = self.checkpoint_t
        if len(ts) == 0 or t < self.t0 - 1e-9 or t > ts[-1] + 1e-9:
            raise ValueError(f"time {t} outside preintegrated interval")
        i = int(np.searchsorted(ts, t - 1e-9))
        if abs(ts[i] - t) <= 1e-9:
            return self.checkpoint_gamma[i], self.checkpoint_jac[i]
        if i == 0:
            ta, ga, ja = self.t0, quat_identity(), np.zeros((3, 3))
        else:
            ta, ga, ja = ts[i - 1], self.checkpoint_gamma[i - 1], self.checkpoint_jac[i - 1]
        s = (t - ta) / (ts[i] - ta)
        return (quat_slerp(ga, self.checkpoint_gamma[i], s),
                (1.0 - s) * ja + s * self.checkpoint_jac[i])


def integrate_measurement(pre: PreintegratedImu, s0: ImuSample, s1: ImuSample,
                          noise: ImuNoiseParams | None = None) -> PreintegratedImu:
    """Advance ``pre`` by one sample interval. Returns the same object."""
    if noise is not None and noise is not pre.noise:
        pre.noise = noise
    pre.integrate(s0, s1)
    return pre


def preintegrate(samples: Sequence[ImuSample], bg, ba, noise: ImuNoiseParams) -> PreintegratedImu:
    pre = PreintegratedImu(np.asarray(bg, float), np.asarray(ba, float), noise)
    if len(samples) >= 2:
        pre.integrate_arrays([s.t for s in samples], [s.gyro for s in samples],
                             [s.accel for s in samples])
    return pre


def bias_correct(pre: PreintegratedImu, b_g_new, b_a_new,
                 thresholds: tuple[float, float] = (0.01, 0.1)):
    """First-order bias update of (alpha, beta, gamma).

    Raises RepropagationRequired when the bias change exceeds
    ``thresholds`` = (gyro rad/s, accel m/s^2).
    """
    dbg = np.linalg.norm(np.asarray(b_g_new) - pre.bg_lin)
    dba = np.linalg.norm(np.asarray(b_a_new) - pre.ba_lin)
    if dbg > thresholds[0] or dba > thresholds[1]:
        raise RepropagationRequired(f"|dbg|={dbg:.3g}, |dba|={dba:.3g}")
    return pre.corrected(b_g_new, b_a_new)


def predict_state(pre: PreintegratedImu, x_k: SystemState, g_W=GRAVITY) -> SystemState:
    alpha, beta, gamma = pre.corrected(x_k.bg, x_k.ba)
    dt = pre.dt_total
    R = x_k.R
    g_W = np.asarray(g_W, dtype=float)
    return SystemState(
        p=x_k.p + x_k.v * dt + 0.5 * g_W * dt * dt + R @ alpha,
        q=quat_multiply(x_k.q, gamma),
        v=x_k.v + g_W * dt + R @ beta,
        bg=x_k.bg.copy(),
        ba=x_k.ba.copy(),
        t=x_k.t + dt,
    )


def _relative_error_quat(q_k, q_k1, gamma_c):
    qe = quat_multiply(quat_multiply(quat_conjugate(q_k), q_k1), quat_conjugate(gamma_c))
    return qe


def inertial_residual(pre: PreintegratedImu, x_k: SystemState, x_k1: SystemState,
                      g_W=GRAVITY) -> np.ndarray:
    """15-vector [position, velocity, orientation, gyro bias, accel bias]."""
    alpha, beta, gamma = pre.corrected(x_k.bg, x_k.ba)
    dt = pre.dt_total
    g_W = np.asarray(g_W, dtype=float)
    Rt = x_k.R.T
    qe = _relative_error_quat(x_k.q, x_k1.q, gamma)
    r = np.empty(15)
    r[ALPHA] = Rt @ (x_k1.p - x_k.p - x_k.v * dt - 0.5 * g_W * dt * dt) - alpha
    r[BETA] = Rt @ (x_k1.v - x_k.v - g_W * dt) - beta
    r[THETA] = 2.0 * qe[1:]
    r[BG] = x_k1.bg - x_k.bg
    r[BA] = x_k1.ba - x_k.ba
    return r


def residual_jacobians(pre: PreintegratedImu, x_k: SystemState, x_k1: SystemState,
                       g_W=GRAVITY):
    """Analytic Jacobians (15x15 each) w.r.t. the tangent of x_k and x_k1."""
    _, Jk, Jk1 = linearize_inertial(pre, x_k, x_k1, g_W)
    return Jk, Jk1


_I3 = np.eye(3)


def linearize_inertial(pre: PreintegratedImu, x_k: SystemState, x_k1: SystemState,
                       g_W=GRAVITY):
    """Residual and both Jacobians in one pass (shares the bias correction)."""
    alpha, beta, gamma = pre.corrected(x_k.bg, x_k.ba)
    dt = pre.dt_total
    g_W = np.asarray(g_W, dtype=float)
    Rt = x_k.R.T
    qe = _relative_error_quat(x_k.q, x_k1.q, gamma)
    w, v = qe[0], qe[1:]
    dp = Rt @ (x_k1.p - x_k.p - x_k.v * dt - 0.5 * g_W * dt * dt)
    dv = Rt @ (x_k1.v - x_k.v - g_W * dt)
    r = np.empty(15)
    r[ALPHA] = dp - alpha
    r[BETA] = dv - beta
    r[THETA] = 2.0 * v
    r[BG] = x_k1.bg - x_k.bg
    r[BA] = x_k1.ba - x_k.ba

    Rg = quat_to_matrix(gamma)
    sv = skew(v)
    L = w * _I3 + sv
    phi = pre.jac[THETA, 0:3] @ (x_k.bg - pre.bg_lin)
    J = pre.jac
    Jk = np.zeros((15, 15))
    Jk[0:3, 0:3] = -Rt
    Jk[0:3, 3:6] = skew(dp)
    Jk[0:3, 6:9] = -Rt * dt
    Jk[0:3, 9:15] = -J[ALPHA]
    Jk[3:6, 3:6] = skew(dv)
    Jk[3:6, 6:9] = -Rt
    Jk[3:6, 9:15] = -J[BETA]
    Jk[6:9, 3:6] = sv - w * _I3
    Jk[6:9, 9:12] = -L @ Rg @ right_jacobian(phi) @ J[THETA, 0:3]
    Jk[9:15, 9:15] = -np.eye(6)

    Jk1 = np.zeros((15, 15))
    Jk1[0:3, 0:3] = Rt
    Jk1[3:6, 6:9] = Rt
    Jk1[6:9, 3:6] = L @ Rg
    Jk1[9:15, 9:15] = np.eye(6)
    return r, Jk, Jk1


def residual_information(pre: PreintegratedImu, x_k: SystemState) -> np.ndarray:
    """Inverse covariance of the residual.

    The orientation block of the residual is a left error on gamma, while the
    propagated covariance is on a right perturbation, hence the rotation.
    """
    _, _, gamma = pre.corrected(x_k.bg, x_k.ba)
    T = np.eye(15)
    T[THETA, THETA] = quat_to_matrix(gamma)
    cov = T @ pre.cov @ T.T
    cov = 0.5 * (cov + cov.T) + np.eye(15) * 1e-18
    info = np.linalg.inv(cov)
    return 0.5 * (info + info.T)

