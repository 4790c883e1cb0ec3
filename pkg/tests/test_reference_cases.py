"""Small hand-checkable cases across the modules."""
import numpy as np
import pytest

from vimo.estimator import DenseSystem, OptimizerConfig, levenberg_marquardt, schur_complement
from vimo.estimator.window import FactorGraphWindow, Frame, keyframe_policy
from vimo.evaluation import associate, ate, rpe_yaw, umeyama_align
from vimo.imu import (ImuNoiseParams, ImuSample, SystemState, inertial_residual, predict_state,
                      preintegrate)
from vimo.magnetometer import MagCalibration, MagSample, apply_calibration
from vimo.simulator import SimConfig, TrajectoryModel, evaluate, gen_imu, gen_mag
from vimo.so3 import exp_so3, log_so3, quat_exp, quat_log, quat_multiply, quat_to_matrix, rot_x, rot_z
from vimo.trajectory import Trajectory
from vimo.vision import CameraModel, FeatureObservation, project, triangulate


# ---------------------------------------------------------------- rotations

def test_rotation_cases():
    assert np.array_equal(exp_so3(np.zeros(3)), np.eye(3))
    assert np.allclose(exp_so3([np.pi / 2, 0, 0]), [[1, 0, 0], [0, 0, -1], [0, 1, 0]], atol=1e-15)
    assert np.allclose(np.abs(log_so3(np.diag([1.0, -1.0, -1.0]))), [np.pi, 0, 0])
    a = quat_exp([0.3, -0.2, 0.1])
    assert np.allclose(quat_multiply(a, [1, 0, 0, 0]), a)
    assert np.allclose(quat_log(quat_multiply(quat_exp([0, 0, 0.2]), quat_exp([0, 0, 0.3]))), [0, 0, 0.5],
                       atol=1e-12)
    rng = np.random.default_rng(0)
    for _ in range(1000):
        v = rng.normal(size=3)
        v *= rng.uniform(0, 3.1) / np.linalg.norm(v)
        assert np.abs(log_so3(exp_so3(v)) - v).max() < 1e-8


# ---------------------------------------------------------------- IMU

def test_bias_exact_inputs_integrate_to_nothing():
    bg, ba = np.array([0.01, -0.02, 0.03]), np.array([0.1, 0.2, -0.1])
    s = [ImuSample(i * 0.01, bg, ba) for i in range(50)]
    pre = preintegrate(s, bg, ba, ImuNoiseParams())
    assert np.abs(pre.alpha).max() < 1e-15 and np.abs(pre.beta).max() < 1e-15
    assert np.allclose(pre.gamma, [1, 0, 0, 0])


def test_constant_rate_rotation():
    s = [ImuSample(i * 0.01, np.array([0, 0, 1.0]), np.zeros(3)) for i in range(101)]
    pre = preintegrate(s, np.zeros(3), np.zeros(3), ImuNoiseParams())
    assert np.abs(quat_log(pre.gamma) - [0, 0, 1.0]).max() < 1e-6


def test_uniform_motion_and_residual_blocks():
    s = [ImuSample(i * 0.01, np.zeros(3), np.zeros(3)) for i in range(201)]
    pre = preintegrate(s, np.zeros(3), np.zeros(3), ImuNoiseParams())
    x0 = SystemState(np.zeros(3), quat_exp([0, 0, 0.4]), np.array([1.0, 0, 0]), np.zeros(3), np.zeros(3))
    x1 = predict_state(pre, x0, np.zeros(3))
    assert np.allclose(x1.p, [2, 0, 0], atol=1e-12)
    assert np.abs(inertial_residual(pre, x0, x1, np.zeros(3))).max() < 1e-8
    d = np.array([0.1, 0.0, 0.0])
    moved = SystemState(x1.p + d, x1.q, x1.v, x1.bg, x1.ba)
    r0 = inertial_residual(pre, x0, x1, np.zeros(3))
    r1 = inertial_residual(pre, x0, moved, np.zeros(3))
    assert np.allclose(r1[:3] - r0[:3], x0.R.T @ d, atol=1e-12)
    bumped = SystemState(x1.p, x1.q, x1.v, x1.bg + [0.01, 0, 0], x1.ba)
    assert np.allclose(inertial_residual(pre, x0, bumped, np.zeros(3))[9:12], [0.01, 0, 0])


# ---------------------------------------------------------------- magnetometer

def test_calibration_arithmetic():
    raw = MagSample(1.0, np.array([1.5, 0.0, 0.0]))
    assert np.allclose(apply_calibration(raw, MagCalibration.identity()).m, raw.m)
    out = apply_calibration(raw, MagCalibration(np.eye(3), np.array([0.5, 0, 0])))
    assert np.allclose(out.m, [1, 0, 0]) and out.t == 1.0


def test_simulated_field_samples():
    cfg = SimConfig()
    _, m = gen_mag(TrajectoryModel("stationary", 1.0), cfg.env(), cfg)
    assert np.allclose(m, cfg.env().m_W, atol=1e-15)
    cfg = SimConfig(inclination=0.0)
    _, m = gen_mag(TrajectoryModel("stationary", 1.0, yaw0=np.pi / 2), cfg.env(), cfg)
    assert np.allclose(m, [1, 0, 0], atol=1e-12)


# ---------------------------------------------------------------- vision

def test_projection_cases():
    cam = CameraModel(400, 400, 320, 320, 640, 640)
    I = (np.eye(3), np.zeros(3))
    assert np.allclose(project(cam, I, [0, 0, 1.0]), [320, 320])
    assert np.allclose(project(cam, I, [0.1, 0, 1.0]), [360, 320])
    # 0.01 m lateral shift at 1 m depth moves the image point by fx * 0.01 = 4 px
    obs = FeatureObservation(0, 0, project(cam, I, [0, 0, 1.0]))
    r = project(cam, I, [0.01, 0, 1.0]) - obs.uv
    assert abs(r[0] - 4.0) < 0.04 and abs(r[1]) < 1e-12


def test_triangulation_degenerate_line():
    cam = CameraModel(400, 400, 320, 240, 640, 480)
    # camera centers on the optical axis, point on the same line
    poses = [(np.eye(3), np.array([0, 0, z])) for z in (0.0, 0.5)]
    X = np.array([0.0, 0.0, 5.0])
    obs = [(FeatureObservation(i, 0, project(cam, T, X)), T) for i, T in enumerate(poses)]
    assert triangulate(obs, cam).low_quality


def test_two_view_triangulation():
    cam = CameraModel.forward_looking()
    X = np.array([6.0, -0.5, 0.3])
    poses = [(np.eye(3), np.zeros(3)), (rot_z(0.05), np.array([0.0, 0.4, 0.0]))]
    obs = [(FeatureObservation(i, 0, project(cam, T, X)), T) for i, T in enumerate(poses)]
    assert np.abs(triangulate(obs, cam).point - X).max() < 1e-6


# ---------------------------------------------------------------- estimator

def _frame(fid, ids, p=(0, 0, 0)):
    x = SystemState(np.array(p, float), np.array([1.0, 0, 0, 0]), np.zeros(3), np.zeros(3), np.zeros(3))
    return Frame(fid, float(fid), x, True, np.array(ids), np.zeros((len(ids), 2)))


def test_keyframe_rules():
    w = FactorGraphWindow(CameraModel.forward_looking())
    w.states.append(_frame(0, [1, 2, 3, 4]))
    assert not keyframe_policy(w, _frame(1, [1, 2, 3, 4]))
    assert keyframe_policy(w, _frame(1, [7, 8]))
    assert keyframe_policy(w, _frame(1, [1, 2, 9, 10], p=(0.1, 0, 0)))


def test_one_gauss_newton_step_solves_linear_problem():
    rng = np.random.default_rng(1)
    A, y = rng.normal(size=(12, 4)), rng.normal(size=12)

    class Linear:
        def cost(self, x):
            r = A @ x - y
            return float(r @ r)

        def linearize(self, x):
            r = A @ x - y
            return DenseSystem(A.T @ A, A.T @ r, float(r @ r))

        def retract(self, x, dx):
            return x + dx
    x, rep = levenberg_marquardt(Linear(), np.zeros(4), OptimizerConfig(lm_initial_lambda=0.0, max_iterations=1))
    assert np.abs(x - np.linalg.lstsq(A, y, rcond=None)[0]).max() < 1e-10


def test_marginalizing_unconnected_variable_leaves_prior():
    H = np.diag([2.0, 3.0, 5.0])
    H[0, 1] = H[1, 0] = 0.5
    b = np.array([1.0, 2.0, 3.0])
    Hs, bs, keep = schur_complement(H, b, [2])
    assert np.array_equal(Hs, H[:2, :2]) and np.array_equal(bs, b[:2])


# ---------------------------------------------------------------- simulator

def test_trajectory_parametrization():
    m = TrajectoryModel("circle", 100.0, radius=5.0, rate=0.1)
    g = evaluate(m, [0.0, 20.0, 50.0])
    assert np.allclose(g.p[0], [5, 0, 0])
    assert np.allclose(np.linalg.norm(g.a[1:], axis=1), 0.05)
    s = evaluate(TrajectoryModel("stationary", 10.0), np.linspace(0, 10, 7))
    assert not np.any(s.v) and not np.any(s.a) and not np.any(s.omega)


def test_stationary_imu_reads_gravity_reaction():
    cfg = SimConfig()
    _, gyro, accel, _, _ = gen_imu(TrajectoryModel("stationary", 1.0, yaw0=0.7), cfg.env(), cfg)
    assert not np.any(gyro)
    assert np.allclose(accel, [0, 0, 9.80665], atol=1e-12)


# ---------------------------------------------------------------- evaluation

def _line(n=101, speed=1.0):
    t = np.arange(n) * 1.0
    return Trajectory(t, np.column_stack([speed * t, 0 * t, 0 * t]), np.tile([1.0, 0, 0, 0], (n, 1)))


def test_association_and_alignment_cases():
    ref = _line()
    assert associate(ref, ref) == [(i, i) for i in range(len(ref))]
    P = np.random.default_rng(2).normal(size=(20, 3))
    al = umeyama_align(P, P, "sim3")
    assert al.scale == 1.0 and np.array_equal(al.rotation, np.eye(3))
    R = rot_z(np.radians(30))
    al = umeyama_align(P, 2 * P @ R.T + [1, 2, 3], "se3")
    assert al.scale == 1.0
    res = np.sqrt((((al.apply(P)) - (2 * P @ R.T + [1, 2, 3])) ** 2).sum(1).mean())
    assert res > 0.1


def test_ate_rmse_matches_direct_formula():
    rng = np.random.default_rng(3)
    ref = _line(50)
    noisy = Trajectory(ref.t, ref.p + 0.01 * rng.normal(size=ref.p.shape), ref.q)
    a = ate(noisy, ref, "none")
    assert a.rmse_trans == pytest.approx(np.sqrt(((noisy.p - ref.p) ** 2).sum(1).mean()), rel=1e-12)


def test_rpe_linear_yaw_drift_and_orthogonal_drift():
    ref = _line()
    rate = np.radians(0.1)
    est = Trajectory(ref.t, ref.p, np.array([quat_exp([0, 0, rate * t]) for t in ref.t]))
    (s,) = rpe_yaw(est, ref, [10.0])
    assert s.mean == pytest.approx(1.0, rel=0.05)
    rolled = Trajectory(ref.t, ref.p, np.array([quat_exp([rate * t, 0, 0]) for t in ref.t]))
    assert rpe_yaw(rolled, ref, [10.0])[0].mean < 1e-9
