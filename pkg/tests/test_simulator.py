import numpy as np
import pytest

from vimo.imu import GRAVITY, ImuNoiseParams, ImuSample, SystemState, predict_state, preintegrate
from vimo.simulator import (SimConfig, TrajectoryModel, camera_times, evaluate, gen_imu,
                            gen_mag, simulate, true_calibration)
from vimo.so3 import log_so3, matrix_to_quat, skew


@pytest.mark.parametrize("model", [
    TrajectoryModel("circle", 30.0, radius=5, rate=0.2, rest=1.0, wobble_amp=0.1, height_amp=0.3),
    TrajectoryModel("lissajous", 30.0, wobble_amp=0.2),
])
def test_derivatives_are_consistent(model):
    t = np.linspace(2.0, 28.0, 50)
    h = 1e-5
    gp, gm, g0 = evaluate(model, t + h), evaluate(model, t - h), evaluate(model, t)
    assert np.abs((gp.p - gm.p) / (2 * h) - g0.v).max() < 1e-6
    assert np.abs((gp.v - gm.v) / (2 * h) - g0.a).max() < 1e-6
    for i in range(len(t)):
        dR = (gp.R[i] - gm.R[i]) / (2 * h)
        assert np.abs(g0.R[i].T @ dR - skew(g0.omega[i])).max() < 1e-6


def test_rest_period_is_stationary():
    model = TrajectoryModel("circle", 10.0, rest=1.0)
    g = evaluate(model, np.linspace(0, 1.0, 20))
    assert np.abs(g.v).max() == 0.0 and np.abs(g.omega).max() == 0.0
    assert np.allclose(g.p, g.p[0])


def test_noise_free_imu_integrates_to_truth():
    model = TrajectoryModel("circle", 12.0, radius=5, rate=0.3, rest=1.0, wobble_amp=0.1)
    cfg = SimConfig()
    t, gyro, accel, bg, ba = gen_imu(model, cfg.env(), cfg)
    assert np.all(bg == 0) and np.all(ba == 0)
    sel = slice(800, 1001)
    pre = preintegrate([ImuSample(*x) for x in zip(t[sel], gyro[sel], accel[sel])],
                       np.zeros(3), np.zeros(3), ImuNoiseParams())
    g = evaluate(model, t[[800, 1000]])
    x0 = SystemState(g.p[0], matrix_to_quat(g.R[0]), g.v[0], np.zeros(3), np.zeros(3))
    x1 = predict_state(pre, x0, GRAVITY)
    assert np.abs(x1.p - g.p[1]).max() < 1e-4
    assert np.linalg.norm(log_so3(x1.R.T @ g.R[1])) < 1e-6


def test_noise_statistics_and_bias_walk():
    model = TrajectoryModel("stationary", 200.0)
    cfg = SimConfig(sigma_g=1e-3, sigma_a=2e-3, sigma_bg=1e-4, bg0=(0.01, 0, 0), seed=3)
    t, gyro, accel, bg, ba = gen_imu(model, cfg.env(), cfg)
    dt = 1.0 / cfg.imu_rate
    white = gyro - bg
    assert abs(white.std() / (1e-3 / np.sqrt(dt)) - 1) < 0.02
    assert np.allclose(bg[0], [0.01, 0, 0])
    steps = np.diff(bg, axis=0)
    assert abs(steps.std() / (1e-4 * np.sqrt(dt)) - 1) < 0.02


def test_mag_model_and_true_calibration():
    model = TrajectoryModel("circle", 5.0)
    cfg = SimConfig(soft_iron=((1.1, 0.05, 0), (0.05, 0.95, 0), (0, 0, 1)), hard_iron=(0.1, -0.05, 0.2))
    t, m = gen_mag(model, cfg.env(), cfg)
    corrected = true_calibration(cfg).correct(m)
    assert np.allclose(np.linalg.norm(corrected, axis=1), 1.0, atol=1e-12)
    g = evaluate(model, t)
    assert np.allclose(np.einsum("nij,nj->ni", g.R, corrected), cfg.env().m_W, atol=1e-12)


def test_camera_times_on_imu_grid():
    ts = camera_times(TrajectoryModel(duration=3.0), SimConfig(cam_rate=15.0))
    k = ts * 200.0
    assert np.allclose(k, np.round(k), atol=1e-9)
    assert ts[0] == 0.0 and ts[-1] <= 3.0


def test_simulate_deterministic_and_seeded():
    model = TrajectoryModel("circle", 15.0, rate=0.2, rest=1.0)
    a = simulate(model, SimConfig(sigma_g=1e-3, sigma_px=0.5, sigma_m=0.01, seed=1))
    b = simulate(model, SimConfig(sigma_g=1e-3, sigma_px=0.5, sigma_m=0.01, seed=1))
    c = simulate(model, SimConfig(sigma_g=1e-3, sigma_px=0.5, sigma_m=0.01, seed=2))
    assert np.array_equal(a.gyro, b.gyro) and np.array_equal(a.tracks.uv, b.tracks.uv)
    assert not np.array_equal(a.gyro, c.gyro)
    assert len(a.tracks) > 0 and a.groundtruth is not None
    assert np.array_equal(a.groundtruth.t, a.tracks.frame_times)


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(cam_rate=400.0)
    with pytest.raises(ValueError):
        TrajectoryModel("spiral")
    with pytest.raises(ValueError):
        evaluate(TrajectoryModel(duration=1.0), [2.0])
