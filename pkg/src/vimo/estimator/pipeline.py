"""End-to-end sequence processing: bootstrap, frame streaming, trajectory output."""
from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from ..dataset import Dataset
from ..imu import GRAVITY, ImuNoiseParams, SystemState
from ..magnetometer import DegenerateAlignmentError, MagNoiseParams, initial_alignment
from ..so3 import matrix_to_quat, quat_to_matrix
from ..trajectory import Trajectory
from .solver import STATE_DIM, MarginalizationPrior, OptimizerConfig
from .window import FactorGraphWindow, MagSegment, add_frame, marginalize, optimize

log = logging.getLogger(__name__)

MODES = ("vio", "vio_mag")


class DatasetFormatError(ValueError):
    pass


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    mode: str = "vio_mag"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    imu_noise: ImuNoiseParams = field(default_factory=ImuNoiseParams)
    mag_noise: MagNoiseParams = field(default_factory=MagNoiseParams)
    sigma_px: float = 1.0
    gravity: float = 9.80665
    stationary_duration: float = 1.0
    stationary_gyro_std: float = 0.02     # rad/s
    stationary_accel_std: float = 0.2     # m/s^2
    prior_sigma_p: float = 1e-3
    prior_sigma_yaw: float = 0.05
    prior_sigma_v: float = 0.01
    prior_sigma_bg: float = 1e-3
    prior_sigma_ba: float = 0.05
    align_with_mag: bool = True           # use the magnetometer for the initial yaw when present
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        for k in ("sigma_px", "gravity", "stationary_duration", "prior_sigma_p",
                  "prior_sigma_yaw", "prior_sigma_v", "prior_sigma_bg", "prior_sigma_ba"):
            if not getattr(self, k) > 0:
                raise ConfigurationError(f"{k} must be positive")

    @property
    def g_W(self) -> np.ndarray:
        return np.array([0.0, 0.0, -self.gravity])


@dataclass
class SequenceStats:
    frames: int = 0
    keyframes: int = 0
    iterations: list = field(default_factory=list)
    frame_seconds: list = field(default_factory=list)
    stationary_start: bool = True
    final_cost: float = 0.0


def _imu_segment(t, gyro, accel, ta: float, tb: float):
    """Samples covering [ta, tb], with linearly interpolated endpoints if needed."""
    tol = 1e-9
    i0 = int(np.searchsorted(t, ta - tol))
    i1 = int(np.searchsorted(t, tb + tol))
    ts, ws, as_ = list(t[i0:i1]), list(gyro[i0:i1]), list(accel[i0:i1])

    def interp(tq):
        k = int(np.clip(np.searchsorted(t, tq), 1, len(t) - 1))
        s = (tq - t[k - 1]) / (t[k] - t[k - 1])
        return (1 - s) * gyro[k - 1] + s * gyro[k], (1 - s) * accel[k - 1] + s * accel[k]

    if not ts or abs(ts[0] - ta) > tol:
        w, a = interp(ta)
        ts.insert(0, ta), ws.insert(0, w), as_.insert(0, a)
    if abs(ts[-1] - tb) > tol:
        w, a = interp(tb)
        ts.append(tb), ws.append(w), as_.append(a)
    return np.array(ts), np.array(ws), np.array(as_)


def _bootstrap(ds: Dataset, cfg: RunConfig, t_first: float, mag_cal, stats: SequenceStats):
    """Initial state from the first stationary second (or the first samples)."""
    sel = (ds.imu_t >= t_first - 1e-9) & (ds.imu_t <= t_first + cfg.stationary_duration + 1e-9)
    gyro, accel = ds.gyro[sel], ds.accel[sel]
    stationary = (len(gyro) >= 2
                  and gyro.std(axis=0).max() < cfg.stationary_gyro_std
                  and np.linalg.norm(accel, axis=1).std() < cfg.stationary_accel_std
                  and np.linalg.norm(gyro.mean(axis=0)) < 0.1)
    if not stationary:
        warnings.warn("no stationary segment at the start; aligning on the first samples")
        k = int(np.searchsorted(ds.imu_t, t_first - 1e-9))
        gyro, accel = ds.gyro[k:k + 1], ds.accel[k:k + 1]
    stats.stationary_start = stationary
    a_mean = accel.mean(axis=0)
    bg = gyro.mean(axis=0) if stationary else np.zeros(3)
    q = None
    if mag_cal is not None and cfg.align_with_mag:
        msel = (ds.mag_t >= t_first - 1e-9) & (ds.mag_t <= t_first + cfg.stationary_duration + 1e-9)
        if not stationary or msel.sum() == 0:
            msel = np.zeros(len(ds.mag_t), bool)
            msel[int(np.searchsorted(ds.mag_t, t_first - 1e-9)) % len(ds.mag_t)] = True
        try:
            q = initial_alignment(a_mean, mag_cal[msel].mean(axis=0))
        except DegenerateAlignmentError as exc:
            warnings.warn(f"magnetometer alignment failed ({exc}); yaw set to zero")
    if q is None:
        q = _gravity_alignment(a_mean)
    x0 = SystemState(np.zeros(3), q, np.zeros(3), bg, np.zeros(3), t_first)
    return x0, stationary


def _gravity_alignment(a_mean) -> np.ndarray:
    """Roll/pitch from gravity with zero yaw."""
    up = np.asarray(a_mean, dtype=float) / np.linalg.norm(a_mean)
    ref = np.array([1.0, 0.0, 0.0]) if abs(up[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    y = np.cross(up, ref)
    y /= np.linalg.norm(y)
    x = np.cross(y, up)
    R_BW = np.column_stack([x, y, up])       # columns: world axes in body
    R_WB = R_BW.T
    yaw = np.arctan2(R_WB[1, 0], R_WB[0, 0])
    c, s = np.cos(-yaw), np.sin(-yaw)
    Rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    return matrix_to_quat(Rz @ R_WB)


def anchor_prior(x0: SystemState, frame_id: int, cfg: RunConfig, stationary: bool) -> MarginalizationPrior:
    """Weak gauge prior on the first state: position, yaw, velocity and biases."""
    rows = []

    def block(cols, M):
        r = np.zeros((M.shape[0], STATE_DIM))
        r[:, cols] = M
        rows.append(r)

    block(slice(0, 3), np.eye(3) / cfg.prior_sigma_p)
    # yaw of a right perturbation: world z component of R d_theta
    block(slice(3, 6), (quat_to_matrix(x0.q)[2:3, :]) / cfg.prior_sigma_yaw)
    sv = cfg.prior_sigma_v if stationary else 1.0
    block(slice(6, 9), np.eye(3) / sv)
    sbg = cfg.prior_sigma_bg if stationary else 0.05
    block(slice(9, 12), np.eye(3) / sbg)
    block(slice(12, 15), np.eye(3) / cfg.prior_sigma_ba)
    J0 = np.vstack(rows)
    return MarginalizationPrior(J0, np.zeros(len(J0)), [x0], [frame_id])


def _frames(ds: Dataset):
    """(frame_id, t, landmark_ids, uv) for every frame, including empty ones."""
    tr = ds.tracks
    by_id = {fid: (t, ids, uv) for fid, t, ids, uv in tr.frames()}
    if tr.frame_times is not None:
        for fid, t in enumerate(tr.frame_times):
            t_, ids, uv = by_id.get(fid, (t, np.zeros(0, int), np.zeros((0, 2))))
            keep = ids >= 0
            yield fid, float(t), ids[keep], uv[keep]
    else:
        for fid in sorted(by_id):
            t, ids, uv = by_id[fid]
            keep = ids >= 0
            yield fid, t, ids[keep], uv[keep]


def validate_dataset(ds: Dataset, cfg: RunConfig) -> None:
    if ds.imu_t is None or len(ds.imu_t) < 2:
        raise DatasetFormatError("dataset has no IMU samples")
    if ds.tracks is None or (len(ds.tracks) == 0 and ds.tracks.frame_times is None):
        raise DatasetFormatError("dataset has no camera frames")
    if cfg.mode == "vio_mag" and (not ds.has_mag or ds.magcal is None):
        raise ConfigurationError("mode vio_mag requires magnetometer samples and a calibration")


def run_sequence(ds: Dataset, cfg: RunConfig, stats: SequenceStats | None = None) -> Trajectory:
    """Stream all frames through add_frame / optimize / marginalize.

    Returns one pose per keyframe, each at its final (marginalization-time)
    estimate.
    """
    validate_dataset(ds, cfg)
    stats = stats if stats is not None else SequenceStats()
    ocfg = cfg.optimizer
    use_mag = cfg.mode == "vio_mag"
    mag_cal = ds.magcal.correct(ds.mag) if (ds.has_mag and ds.magcal is not None) else None

    window = FactorGraphWindow(ds.camera, ocfg, cfg.imu_noise, cfg.mag_noise, cfg.sigma_px,
                               cfg.g_W, use_mag)
    frames = [f for f in _frames(ds) if ds.imu_t[0] - 1e-9 <= f[1] <= ds.imu_t[-1] + 1e-9]
    if not frames:
        raise DatasetFormatError("no camera frame lies inside the IMU time range")
    t_prev = None
    for fid, t, ids, uv in frames:
        tic = time.perf_counter()
        if t_prev is None:
            x0, stationary = _bootstrap(ds, cfg, t, mag_cal, stats)
            add_frame(window, fid, t, x0, lm_ids=ids, uv=uv)
            window.prior = anchor_prior(window.states[0].x, fid, cfg, stationary)
            t_prev = t
            continue
        if not t > t_prev:
            raise DatasetFormatError(f"frame {fid}: timestamp {t} does not increase")
        seg = _imu_segment(ds.imu_t, ds.gyro, ds.accel, t_prev, t)
        mseg = None
        if use_mag:
            lo = int(np.searchsorted(ds.mag_t, t_prev, side="right"))
            hi = int(np.searchsorted(ds.mag_t, t + 1e-9, side="right"))
            if hi > lo:
                idx = np.arange(lo, hi)
                idx_j = idx[idx % ocfg.mag_stride == 0]
                mseg = MagSegment(ds.mag_t[idx_j], mag_cal[idx_j], ds.mag_t[hi - 1], mag_cal[hi - 1])
        add_frame(window, fid, t, None, seg, mseg, ids, uv)
        optimize(window)
        stats.iterations.append(window.last_report.iterations)
        stats.final_cost = window.last_report.final_cost
        marginalize(window)
        stats.frame_seconds.append(time.perf_counter() - tic)
        t_prev = t
    stats.frames = len(frames)
    rows = list(window.finished) + [(f.t, f.x) for f in window.states if f.keyframe]
    stats.keyframes = len(rows)
    return Trajectory(
        np.array([r[0] for r in rows]),
        np.array([r[1].p for r in rows]),
        np.array([r[1].q for r in rows]),
        np.array([r[1].v for r in rows]),
    )
