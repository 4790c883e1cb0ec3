"""Named simulation scenarios shared by the tests, demos and CLI defaults."""
from __future__ import annotations

from dataclasses import replace

from .estimator import OptimizerConfig, RunConfig
from .imu import ImuNoiseParams
from .magnetometer import MagNoiseParams
from .simulator import SimConfig, TrajectoryModel


def zero_noise_circle(duration: float = 60.0, seed: int = 0):
    """Noise-free circle with a one second rest at the start."""
    model = TrajectoryModel(kind="circle", duration=duration, radius=5.0, rate=0.2, rest=1.0)
    sim = SimConfig(cam_rate=10.0, seed=seed)
    return model, sim


# realistic consumer-grade IMU with a wandering gyro bias
CAVE_IMU = ImuNoiseParams(sigma_g=1.7e-4, sigma_a=2.0e-3, sigma_bg=2.0e-4, sigma_ba=3.0e-4, rate=200.0)


def cave_drift(duration: float = 600.0, seed: int = 0):
    """Slow diver-like loop with sparse texture, a calibrated magnetometer and bias drift.

    Returns (model, sim_config, run_config_factory) where the factory maps a
    mode to a RunConfig.
    """
    model = TrajectoryModel(kind="circle", duration=duration, radius=10.0, rate=0.05, rest=1.0,
                            wobble_amp=0.08, height_amp=0.5)
    sim = SimConfig(
        cam_rate=2.0, seed=seed,
        sigma_g=CAVE_IMU.sigma_g, sigma_a=CAVE_IMU.sigma_a,
        sigma_bg=CAVE_IMU.sigma_bg, sigma_ba=CAVE_IMU.sigma_ba,
        bg0=(0.002, -0.002, 0.002), sigma_m=0.005, sigma_px=1.0,
        soft_iron=((1.1, 0.05, 0.0), (0.05, 0.95, 0.0), (0.0, 0.0, 1.0)),
        hard_iron=(0.1, -0.05, 0.2),
        n_landmarks=300,
    )
    # a few iterations per frame are enough once the window is warm
    opt = OptimizerConfig(max_iterations=3, convergence_tol=1e-3, abs_tol=1e-2, mag_stride=10)

    def run_config(mode: str) -> RunConfig:
        return RunConfig(mode=mode, optimizer=opt, imu_noise=CAVE_IMU,
                         mag_noise=MagNoiseParams(0.005), seed=seed)

    return model, sim, run_config


def with_duration(model: TrajectoryModel, duration: float) -> TrajectoryModel:
    return replace(model, duration=duration)
