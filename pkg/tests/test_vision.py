import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from vimo.vision import (BehindCameraError, CameraModel, FeatureObservation,
                         InsufficientBaselineError, project, project_batch, reprojection_jacobians,
                         reprojection_residual, triangulate, unproject)
from vimo.so3 import exp_so3, rot_z

CAM = CameraModel.forward_looking()


def test_principal_point_projection():
    # body x is the optical axis: a point straight ahead lands on (cx, cy)
    uv = project(CAM, (np.eye(3), np.zeros(3)), np.array([5.0, 0.0, 0.0]))
    assert np.allclose(uv, [CAM.cx, CAM.cy])
    # left of the body (+y) appears at smaller u
    uv = project(CAM, (np.eye(3), np.zeros(3)), np.array([5.0, 1.0, 0.0]))
    assert uv[0] < CAM.cx


def test_behind_camera_raises():
    with pytest.raises(BehindCameraError):
        project(CAM, (np.eye(3), np.zeros(3)), np.array([-1.0, 0.0, 0.0]))
    with pytest.raises(BehindCameraError):
        reprojection_jacobians(CAM, (np.eye(3), np.zeros(3)), np.array([-1.0, 0.0, 0.0]))


def test_camera_validation():
    with pytest.raises(ValueError):
        CameraModel(-1, 1, 0, 0, 10, 10)
    with pytest.raises(ValueError):
        CameraModel(1, 1, 20, 0, 10, 10)


@settings(max_examples=40)
@given(arrays(np.float64, 3, elements=st.floats(-2, 2)), arrays(np.float64, 3, elements=st.floats(-3, 3)),
       st.floats(-300, 300), st.floats(-200, 200), st.floats(0.5, 20))
def test_unproject_project_roundtrip(rot, p, du, dv, depth):
    R = exp_so3(rot)
    uv = np.array([CAM.cx + du, CAM.cy + dv])
    o, d = unproject(CAM, (R, p), uv)
    # point along the ray at the requested camera depth
    d_C = np.array([du / CAM.fx, dv / CAM.fy, 1.0])
    X = o + d * depth * np.linalg.norm(d_C)
    assert np.allclose(project(CAM, (R, p), X), uv, atol=1e-8)


def test_batch_matches_scalar():
    rng = np.random.default_rng(0)
    R = np.array([exp_so3(rng.normal(size=3) * 0.2) for _ in range(5)])
    p = rng.normal(size=(5, 3))
    l = p + np.einsum("nij,j->ni", R, [6.0, 0.3, -0.2])
    uv, J_pose, J_l, depth = project_batch(CAM, R, p, l)
    for i in range(5):
        assert depth[i] > 0
        assert np.allclose(uv[i], project(CAM, (R[i], p[i]), l[i]))
        Jp, Jl = reprojection_jacobians(CAM, (R[i], p[i]), l[i])
        assert np.allclose(J_pose[i], Jp) and np.allclose(J_l[i], Jl)


def test_residual():
    obs = FeatureObservation(0, 0, np.array([CAM.cx + 1.0, CAM.cy]), 1.0)
    r = reprojection_residual(obs, CAM, (np.eye(3), np.zeros(3)), np.array([5.0, 0, 0]))
    assert np.allclose(r, [-1.0, 0.0])


def test_triangulation_exact_and_degenerate():
    X = np.array([8.0, 1.0, 0.5])
    poses = [(rot_z(a), np.array([0.0, y, 0.0])) for a, y in ((0.0, 0.0), (0.05, 0.5), (-0.05, 1.0))]
    obs = [(FeatureObservation(i, 0, project(CAM, T, X)), T) for i, T in enumerate(poses)]
    res = triangulate(obs, CAM)
    assert np.allclose(res.point, X, atol=1e-9)
    assert not res.low_quality and res.max_reproj_px < 1e-6
    same = [(obs[0][0], poses[0]), (obs[0][0], poses[0])]
    with pytest.raises(InsufficientBaselineError):
        triangulate(same, CAM)
    with pytest.raises(InsufficientBaselineError):
        triangulate(obs[:1], CAM)
