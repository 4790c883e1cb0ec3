"""Analytic ground-truth trajectories and synthetic IMU, magnetometer and track data.

All derivatives are closed form. A trajectory may start with a stationary
rest period followed by a smooth (quintic) ramp into motion, which is what
the estimator's bootstrap alignment expects.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .dataset import Dataset, TrackTable
from .imu import GRAVITY
from .magnetometer import MagCalibration, fit_ellipsoid, world_field
from .so3 import matrix_to_quat, rot_x, rot_y, rot_z
from .trajectory import Trajectory
from .vision import CameraModel


class GroundTruth(NamedTuple):
    p: np.ndarray       # (n, 3) world position
    R: np.ndarray       # (n, 3, 3) R_WB
    v: np.ndarray       # (n, 3)
    a: np.ndarray       # (n, 3) world acceleration
    omega: np.ndarray   # (n, 3) body angular rate


@dataclass(frozen=True)
class TrajectoryModel:
    kind: str = "circle"            # circle | lissajous | stationary
    duration: float = 60.0
    radius: float = 5.0             # circle radius [m]
    rate: float = 0.1               # circle angular rate [rad/s]
    height_amp: float = 0.0         # vertical oscillation [m]
    height_freq: float = 0.3        # [rad/s]
    amplitudes: tuple = (6.0, 4.0, 0.5)    # lissajous [m]
    freqs: tuple = (0.05, 0.1, 0.15)       # lissajous [rad/s]
    yaw0: float = 0.0               # stationary / lissajous yaw offset [rad]
    yaw_amp: float = 0.6            # lissajous yaw oscillation [rad]
    yaw_freq: float = 0.07          # [rad/s]
    wobble_amp: float = 0.0         # roll/pitch oscillation [rad]
    wobble_freq: float = 0.8        # [rad/s]
    rest: float = 0.0               # stationary lead-in [s]
    ramp: float = 2.0               # smooth start after the rest [s]
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.kind not in ("circle", "lissajous", "stationary"):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if not self.duration > 0:
            raise ValueError("duration must be positive")


def _time_warp(model: TrajectoryModel, t: np.ndarray):
    """Warped time tau(t) with derivatives; zero during the rest period."""
    if model.rest <= 0.0 and model.ramp <= 0.0:
        return t, np.ones_like(t), np.zeros_like(t)
    if model.ramp <= 0.0:
        moving = t > model.rest
        return np.where(moving, t - model.rest, 0.0), moving.astype(float), np.zeros_like(t)
    T = model.ramp
    u = np.clip((t - model.rest) / T, 0.0, 1.0)
    tau_ramp = T * (u**6 - 3 * u**5 + 2.5 * u**4)
    s = 6 * u**5 - 15 * u**4 + 10 * u**3
    ds = (30 * u**4 - 60 * u**3 + 30 * u**2) / T
    after = t >= model.rest + T
    tau = np.where(after, 0.5 * T + (t - model.rest - T), tau_ramp)
    return tau, np.where(after, 1.0, s), np.where(after, 0.0, ds)


def _path(model: TrajectoryModel, tau: np.ndarray):
    """Position and its first two derivatives w.r.t. warped time."""
    z = np.zeros_like(tau)
    if model.kind == "circle":
        r, w = model.radius, model.rate
        hz, fz = model.height_amp, model.height_freq
        P = np.column_stack([r * np.cos(w * tau), r * np.sin(w * tau), hz * np.sin(fz * tau)])
        dP = np.column_stack([-r * w * np.sin(w * tau), r * w * np.cos(w * tau),
                              hz * fz * np.cos(fz * tau)])
        ddP = np.column_stack([-r * w * w * np.cos(w * tau), -r * w * w * np.sin(w * tau),
                               -hz * fz * fz * np.sin(fz * tau)])
    elif model.kind == "lissajous":
        A = np.asarray(model.amplitudes)
        f = np.asarray(model.freqs)
        ph = np.array([0.0, 0.5 * np.pi, 0.0])
        arg = tau[:, None] * f + ph
        P = A * np.sin(arg) - A * np.sin(ph)
        dP = A * f * np.cos(arg)
        ddP = -A * f * f * np.sin(arg)
    else:
        P, dP, ddP = (np.column_stack([z, z, z]) for _ in range(3))
    return P + np.asarray(model.origin), dP, ddP


def _attitude(model: TrajectoryModel, tau: np.ndarray):
    """(yaw, pitch, roll) and derivatives w.r.t. warped time."""
    z = np.zeros_like(tau)
    if model.kind == "circle":
        yaw = model.rate * tau + np.sign(model.rate or 1.0) * 0.5 * np.pi + model.yaw0
        dyaw = np.full_like(tau, model.rate)
    elif model.kind == "lissajous":
        yaw = model.yaw0 + model.yaw_amp * np.sin(model.yaw_freq * tau)
        dyaw = model.yaw_amp * model.yaw_freq * np.cos(model.yaw_freq * tau)
    else:
        yaw, dyaw = z + model.yaw0, z
    A, f = model.wobble_amp, model.wobble_freq
    pitch = A * np.sin(f * tau)
    dpitch = A * f * np.cos(f * tau)
    roll = 0.7 * A * np.sin(1.3 * f * tau + 1.0) - 0.7 * A * np.sin(1.0)
    droll = 0.7 * A * 1.3 * f * np.cos(1.3 * f * tau + 1.0)
    return (yaw, pitch, roll), (dyaw, dpitch, droll)


def _euler_to_matrix(yaw, pitch, roll) -> np.ndarray:
    cy, sy = np.cos(yaw), np.sin(yaw)
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    R = np.empty((len(yaw), 3, 3))
    R[:, 0, 0] = cy * cp
    R[:, 0, 1] = cy * sp * sr - sy * cr
    R[:, 0, 2] = cy * sp * cr + sy * sr
    R[:, 1, 0] = sy * cp
    R[:, 1, 1] = sy * sp * sr + cy * cr
    R[:, 1, 2] = sy * sp * cr - cy * sr
    R[:, 2, 0] = -sp
    R[:, 2, 1] = cp * sr
    R[:, 2, 2] = cp * cr
    return R


def evaluate(model: TrajectoryModel, t) -> GroundTruth:
    """Vectorized ground truth at the times ``t``."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    if np.any(t < -1e-12) or np.any(t > model.duration + 1e-9):
        raise ValueError(f"time outside [0, {model.duration}]")
    tau, dtau, ddtau = _time_warp(model, t)
    P, dP, ddP = _path(model, tau)
    v = dP * dtau[:, None]
    a = ddP * (dtau**2)[:, None] + dP * ddtau[:, None]
    (yaw, pitch, roll), (dyaw, dpitch, droll) = _attitude(model, tau)
    dyaw, dpitch, droll = dyaw * dtau, dpitch * dtau, droll * dtau
    R = _euler_to_matrix(yaw, pitch, roll)
    omega = np.column_stack([
        droll - dyaw * np.sin(pitch),
        dpitch * np.cos(roll) + dyaw * np.cos(pitch) * np.sin(roll),
        -dpitch * np.sin(roll) + dyaw * np.cos(pitch) * np.cos(roll),
    ])
    return GroundTruth(P, R, v, a, omega)


def ground_truth(model: TrajectoryModel, t: float):
    """(pose (R_WB, p_W), v_W, a_W, omega_B) at a single time."""
    gt = evaluate(model, t)
    return (gt.R[0], gt.p[0]), gt.v[0], gt.a[0], gt.omega[0]


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class EnvModel:
    g_W: np.ndarray = field(default_factory=lambda: GRAVITY.copy())
    m_W: np.ndarray = field(default_factory=world_field)

    @classmethod
    def from_angles(cls, inclination_deg=60.0, declination_deg=0.0, g_W=GRAVITY):
        return cls(np.asarray(g_W, dtype=float), world_field(inclination_deg, declination_deg))

    def __post_init__(self):
        if abs(np.linalg.norm(self.m_W) - 1.0) > 1e-9:
            raise ValueError("world field must have unit norm")


@dataclass(frozen=True)
class SimConfig:
    imu_rate: float = 200.0
    mag_rate: float | None = None
    cam_rate: float = 15.0
    sigma_g: float = 0.0
    sigma_a: float = 0.0
    sigma_bg: float = 0.0
    sigma_ba: float = 0.0
    bg0: tuple = (0.0, 0.0, 0.0)
    ba0: tuple = (0.0, 0.0, 0.0)
    sigma_m: float = 0.0
    sigma_px: float = 0.0
    inclination: float = 60.0
    declination: float = 0.0
    soft_iron: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    hard_iron: tuple = (0.0, 0.0, 0.0)
    n_landmarks: int = 600
    tube_radius: tuple = (2.0, 6.0)
    max_depth: float = 12.0
    max_track_length: int = 0       # 0: unlimited
    calib_samples: int = 2000
    camera: CameraModel = field(default_factory=CameraModel.forward_looking)
    seed: int = 0

    def __post_init__(self):
        if not (self.imu_rate > 0 and self.cam_rate > 0 and (self.mag_rate or 1) > 0):
            raise ValueError("rates must be positive")
        if self.cam_rate > self.imu_rate:
            raise ValueError("cam_rate must not exceed imu_rate")

    @property
    def S(self) -> np.ndarray:
        return np.asarray(self.soft_iron, dtype=float)

    @property
    def h(self) -> np.ndarray:
        return np.asarray(self.hard_iron, dtype=float)

    def env(self) -> EnvModel:
        return EnvModel.from_angles(self.inclination, self.declination)


def _streams(seed: int):
    """Independent RNG per sensor so one stream never shifts another."""
    names = ("imu", "mag", "cam", "landmarks", "calib")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def _sample_times(duration: float, rate: float) -> np.ndarray:
    n = int(np.floor(duration * rate + 1e-9))
    return np.arange(n + 1) / rate


def gen_imu(model: TrajectoryModel, env: EnvModel, config: SimConfig):
    """IMU samples (t, gyro, accel) and the true bias histories.

    accel = R^T (a_W - g_W) + b_a + noise, gyro = omega_B + b_g + noise.
    """
    rng = _streams(config.seed)["imu"]
    t = _sample_times(model.duration, config.imu_rate)
    gt = evaluate(model, t)
    n, dt = len(t), 1.0 / config.imu_rate
    walk = rng.standard_normal((4, n, 3))
    bg = np.asarray(config.bg0, float) + np.cumsum(config.sigma_bg * np.sqrt(dt) * walk[0], axis=0)
    ba = np.asarray(config.ba0, float) + np.cumsum(config.sigma_ba * np.sqrt(dt) * walk[1], axis=0)
    bg = np.vstack([np.asarray(config.bg0, float), bg[:-1]])
    ba = np.vstack([np.asarray(config.ba0, float), ba[:-1]])
    gyro = gt.omega + bg + config.sigma_g / np.sqrt(dt) * walk[2]
    f_W = gt.a - env.g_W
    accel = np.einsum("nji,nj->ni", gt.R, f_W) + ba + config.sigma_a / np.sqrt(dt) * walk[3]
    return t, gyro, accel, bg, ba


def gen_mag(model: TrajectoryModel, env: EnvModel, config: SimConfig):
    """Raw magnetometer samples m = S R^T m_W + h + noise."""
    rng = _streams(config.seed)["mag"]
    t = _sample_times(model.duration, config.mag_rate or config.imu_rate)
    gt = evaluate(model, t)
    body = np.einsum("nji,j->ni", gt.R, env.m_W)
    m = body @ config.S.T + config.h + config.sigma_m * rng.standard_normal((len(t), 3))
    return t, m


def gen_calibration_sequence(env: EnvModel, config: SimConfig, planar: bool = False):
    """Raw samples from a tumbling (or yaw-only) calibration rotation."""
    rng = _streams(config.seed)["calib"]
    rate = config.mag_rate or config.imu_rate
    t = np.arange(config.calib_samples) / rate
    T = t[-1] if t[-1] > 0 else 1.0
    if planar:
        Rs = [rot_z(2 * np.pi * 2 * s / T) for s in t]
    else:
        Rs = [rot_z(2 * np.pi * 3 * s / T) @ rot_y(2 * np.pi * 2.3 * s / T)
              @ rot_x(2 * np.pi * 1.7 * s / T) for s in t]
    body = np.array([R.T @ env.m_W for R in Rs])
    m = body @ config.S.T + config.h + config.sigma_m * rng.standard_normal((len(t), 3))
    return t, m


def place_landmarks(model: TrajectoryModel, config: SimConfig) -> np.ndarray:
    """Landmarks on a tube around the path (radius drawn per landmark)."""
    rng = _streams(config.seed)["landmarks"]
    n = config.n_landmarks
    ts = rng.uniform(0.0, model.duration, n)
    gt = evaluate(model, ts)
    rad = rng.uniform(*config.tube_radius, n)
    pts = np.empty((n, 3))
    for i in range(n):
        axis = gt.v[i] if np.linalg.norm(gt.v[i]) > 1e-6 else gt.R[i][:, 0]
        axis = axis / np.linalg.norm(axis)
        d = rng.standard_normal(3)
        d -= axis * (d @ axis)
        d /= np.linalg.norm(d)
        pts[i] = gt.p[i] + rad[i] * d
    return pts


def camera_times(model: TrajectoryModel, config: SimConfig) -> np.ndarray:
    """Frame times snapped to the IMU sample grid."""
    n = int(np.floor(model.duration * config.cam_rate + 1e-9))
    k = np.round(np.arange(n + 1) * config.imu_rate / config.cam_rate)
    k = k[k <= np.floor(model.duration * config.imu_rate + 1e-9)]
    return np.unique(k) / config.imu_rate


def gen_feature_tracks(model: TrajectoryModel, env: EnvModel, config: SimConfig,
                       landmarks: np.ndarray) -> TrackTable:
    """Project visible landmarks into each frame, with pixel noise.

    A landmark that leaves the view and comes back gets a fresh track id,
    like a frontend losing and re-detecting a feature.
    """
    rng = _streams(config.seed)["cam"]
    cam = config.camera
    times = camera_times(model, config)
    gt = evaluate(model, times)
    track_of = -np.ones(len(landmarks), dtype=int)
    last_seen = -np.ones(len(landmarks), dtype=int)
    age = np.zeros(len(landmarks), dtype=int)
    next_id = 0
    track_landmark = []
    rows_f, rows_t, rows_id, rows_uv = [], [], [], []
    for k, tk in enumerate(times):
        R, p = gt.R[k], gt.p[k]
        c = p + R @ cam.t_BC
        pc = (landmarks - c) @ (R @ cam.R_BC)
        z = pc[:, 2]
        ok = (z > 0.2) & (np.linalg.norm(pc, axis=1) < config.max_depth)
        zs = np.where(ok, z, 1.0)
        uv = np.column_stack([cam.fx * pc[:, 0] / zs + cam.cx, cam.fy * pc[:, 1] / zs + cam.cy])
        ok &= cam.in_bounds(uv)
        idx = np.flatnonzero(ok)
        if len(idx) == 0:
            continue
        uv = uv[idx] + config.sigma_px * rng.standard_normal((len(idx), 2))
        inside = cam.in_bounds(uv)
        idx, uv = idx[inside], uv[inside]
        for j in idx:
            renew = last_seen[j] != k - 1 or track_of[j] < 0
            if config.max_track_length and age[j] >= config.max_track_length:
                renew = True
            if renew:
                track_of[j] = next_id
                track_landmark.append(j)
                next_id += 1
                age[j] = 0
            age[j] += 1
            last_seen[j] = k
        rows_f.append(np.full(len(idx), k))
        rows_t.append(np.full(len(idx), tk))
        rows_id.append(track_of[idx])
        rows_uv.append(uv)
    if rows_f:
        table = TrackTable(np.concatenate(rows_f), np.concatenate(rows_t),
                           np.concatenate(rows_id), np.vstack(rows_uv))
    else:
        table = TrackTable.empty()
    table.frame_times = times
    table.track_landmark = np.array(track_landmark, dtype=int)
    return table


def simulate(model: TrajectoryModel, config: SimConfig) -> Dataset:
    """Full synthetic dataset, including a calibration fitted on a tumbling sequence."""
    env = config.env()
    t_imu, gyro, accel, bg, ba = gen_imu(model, env, config)
    t_mag, mag = gen_mag(model, env, config)
    landmarks = place_landmarks(model, config)
    tracks = gen_feature_tracks(model, env, config, landmarks)
    _, calib_raw = gen_calibration_sequence(env, config)
    magcal = fit_ellipsoid(calib_raw)
    frame_t = tracks.frame_times
    gt = evaluate(model, frame_t)
    groundtruth = Trajectory(frame_t, gt.p, np.array([matrix_to_quat(R) for R in gt.R]), gt.v)
    return Dataset(
        imu_t=t_imu, gyro=gyro, accel=accel, mag_t=t_mag, mag=mag, tracks=tracks,
        camera=config.camera, magcal=magcal, groundtruth=groundtruth,
        mag_calib=calib_raw, landmarks=landmarks, bias_g=bg, bias_a=ba,
    )


def true_calibration(config: SimConfig) -> MagCalibration:
    S = config.S
    A = np.linalg.inv(S)
    return MagCalibration(0.5 * (A + A.T), config.h)
