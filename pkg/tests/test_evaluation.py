import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from vimo.evaluation import (AssociationError, DegenerateAlignmentError, associate, ate,
                             final_yaw_error, rpe_yaw, umeyama_align)
from vimo.so3 import exp_so3, matrix_to_quat, quat_exp, quat_multiply, rot_z
from vimo.trajectory import Trajectory


def circle_traj(n=200, dt=0.1):
    t = np.arange(n) * dt
    p = np.column_stack([5 * np.cos(0.2 * t), 5 * np.sin(0.2 * t), 0.1 * np.sin(t)])
    q = np.array([quat_exp([0.02 * np.sin(x), 0.0, 0.2 * x + np.pi / 2]) for x in t])
    return Trajectory(t, p, q)


def transform(traj, s, R, t):
    qR = matrix_to_quat(R)
    return Trajectory(traj.t, s * traj.p @ R.T + t, np.array([quat_multiply(qR, q) for q in traj.q]))


@settings(max_examples=30)
@given(st.floats(0.2, 5.0), arrays(np.float64, 3, elements=st.floats(-3, 3)),
       arrays(np.float64, 3, elements=st.floats(-10, 10)))
def test_umeyama_recovers_similarity(s, rot, t):
    rng = np.random.default_rng(0)
    P = rng.normal(size=(30, 3))
    R = exp_so3(rot)
    al = umeyama_align(P, s * P @ R.T + t, "sim3")
    assert abs(al.scale - s) < 1e-9 * max(1, s)
    assert np.abs(al.rotation - R).max() < 1e-9
    assert np.abs(al.apply(P) - (s * P @ R.T + t)).max() < 1e-8


def test_se3_mode_keeps_unit_scale():
    P = np.random.default_rng(1).normal(size=(20, 3))
    al = umeyama_align(P, 2 * P, "se3")
    assert al.scale == 1.0


def test_degenerate_alignment():
    P = np.zeros((10, 3))
    P[:, 0] = np.arange(10)
    with pytest.raises(DegenerateAlignmentError):
        umeyama_align(P[:2], P[:2], "se3")


def test_ate_invariant_to_similarity():
    ref = circle_traj()
    est = transform(ref, 1.7, rot_z(0.4) @ exp_so3([0.1, -0.2, 0.0]), np.array([3.0, -1, 2]))
    a = ate(est, ref, "sim3")
    assert a.rmse_trans < 1e-9 and a.rmse_rot < 1e-6
    # a global yaw offset alone is removed by alignment, a position error is not
    noisy = Trajectory(ref.t, ref.p + np.array([0.1, 0, 0]) * (np.arange(len(ref))[:, None] % 2), ref.q)
    assert ate(noisy, ref, "se3").rmse_trans > 0.01


def test_identical_exactly_zero():
    ref = circle_traj()
    a = ate(ref, ref, "sim3")
    assert a.rmse_trans == 0.0 and a.rmse_rot == 0.0
    assert all(r.mean == 0.0 for r in rpe_yaw(ref, ref, [1.0, 3.0]))
    assert final_yaw_error(ref, ref) == 0.0


def test_rpe_detects_constant_rate_drift():
    ref = circle_traj()
    drift = 0.01  # rad/s of yaw drift
    est = Trajectory(ref.t, ref.p,
                     np.array([quat_multiply(quat_exp([0, 0, drift * t]), q) for t, q in zip(ref.t, ref.q)]))
    L = ref.path_length()[-1]
    stats = rpe_yaw(est, ref, [L / 4])
    # the heading error over a segment is the drift over its duration
    speed = L / (ref.t[-1] - ref.t[0])
    assert stats[0].mean == pytest.approx(np.degrees(drift * (L / 4) / speed), rel=0.05)
    assert final_yaw_error(est, ref) == pytest.approx(np.degrees(drift * ref.t[-1]), rel=1e-6)
    with pytest.raises(ValueError):
        rpe_yaw(est, ref, [2 * L])


def test_association_tolerance():
    ref = circle_traj(20)
    shifted = Trajectory(ref.t + 0.005, ref.p, ref.q)
    assert len(associate(shifted, ref, max_dt=0.01)) == 20
    far = Trajectory(ref.t + 50.0, ref.p, ref.q)
    with pytest.raises(AssociationError):
        ate(far, ref)
