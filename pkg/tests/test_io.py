import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from vimo import io as vio
from vimo.dataset import TrackTable
from vimo.magnetometer import MagCalibration
from vimo.simulator import SimConfig, TrajectoryModel, simulate
from vimo.so3 import quat_exp
from vimo.trajectory import Trajectory
from vimo.vision import CameraModel

floats = st.floats(allow_nan=False, allow_infinity=False, width=64)


@settings(max_examples=30)
@given(arrays(np.float64, (5, 6), elements=floats))
def test_imu_roundtrip_exact(tmp_path_factory, vals):
    path = tmp_path_factory.mktemp("imu") / "imu.csv"
    t = np.arange(5) * 0.005
    vio.write_imu(path, t, vals[:, :3], vals[:, 3:])
    t2, g2, a2 = vio.read_imu(path)
    assert np.array_equal(t2, t) and np.array_equal(g2, vals[:, :3]) and np.array_equal(a2, vals[:, 3:])


def test_trajectory_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    traj = Trajectory(np.arange(10) * 0.1 + 1e-9, rng.normal(size=(10, 3)),
                      np.array([quat_exp(rng.normal(size=3)) for _ in range(10)]), rng.normal(size=(10, 3)))
    vio.write_trajectory(tmp_path / "t.csv", traj)
    back = vio.read_trajectory(tmp_path / "t.csv")
    for k in ("t", "p", "q", "v"):
        assert np.array_equal(getattr(back, k), getattr(traj, k))
    header = (tmp_path / "t.csv").read_text().splitlines()[0]
    assert header == "t,px,py,pz,qw,qx,qy,qz,vx,vy,vz"


def test_configs_roundtrip(tmp_path):
    cal = MagCalibration(np.array([[1.1, 0.05, 0.0], [0.05, 0.9, 0.01], [0.0, 0.01, 1.0]]),
                         np.array([0.1, -0.05, 1 / 3]))
    vio.write_magcal(tmp_path / "m.cfg", cal)
    back = vio.read_magcal(tmp_path / "m.cfg")
    assert np.array_equal(back.A, cal.A) and np.array_equal(back.h, cal.h)
    cam = CameraModel.forward_looking(fx=401.5)
    vio.write_camera(tmp_path / "c.cfg", cam)
    c2 = vio.read_camera(tmp_path / "c.cfg")
    assert c2.fx == 401.5 and np.array_equal(c2.R_BC, cam.R_BC) and c2.width == cam.width


def test_dataset_roundtrip(tmp_path):
    ds = simulate(TrajectoryModel("circle", 12.0, rate=0.2, rest=1.0),
                  SimConfig(sigma_g=1e-3, sigma_m=0.01, sigma_px=0.5, seed=4))
    vio.write_dataset(tmp_path / "ds", ds)
    back = vio.read_dataset(tmp_path / "ds")
    assert np.array_equal(back.gyro, ds.gyro) and np.array_equal(back.mag, ds.mag)
    assert np.array_equal(back.tracks.uv, ds.tracks.uv)
    assert np.array_equal(back.tracks.frame_times, ds.tracks.frame_times)
    assert np.array_equal(back.magcal.A, ds.magcal.A)
    assert np.array_equal(back.groundtruth.p, ds.groundtruth.p)
    for name in ("imu.csv", "mag.csv", "tracks.csv", "camera.cfg", "magcal.cfg", "groundtruth.csv"):
        assert (tmp_path / "ds" / name).is_file()


def test_empty_frames_survive(tmp_path):
    tracks = TrackTable([1, 1], [0.2, 0.2], [5, 6], [[1.0, 2.0], [3.0, 4.0]])
    tracks.frame_times = np.array([0.0, 0.2, 0.4])
    vio.write_tracks(tmp_path / "tr.csv", tracks)
    back = vio.read_tracks(tmp_path / "tr.csv")
    assert np.array_equal(back.frame_times, tracks.frame_times)
    assert np.array_equal(back.landmark_id, [5, 6])


@pytest.mark.parametrize("cell, message", [("nan", "non-finite"), ("inf", "non-finite"),
                                           ("-Infinity", "non-finite"), ("abc", "not a number")])
def test_bad_cells_are_located(tmp_path, cell, message):
    path = tmp_path / "imu.csv"
    vio.write_imu(path, np.arange(4) * 0.01, np.zeros((4, 3)), np.zeros((4, 3)))
    lines = path.read_text().splitlines()
    parts = lines[3].split(",")
    parts[2] = cell
    lines[3] = ",".join(parts)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(vio.ValidationError) as exc:
        vio.read_imu(path)
    msg = str(exc.value)
    assert message in msg and "row 4" in msg and "'gy'" in msg and "imu.csv" in msg


def test_structural_errors(tmp_path):
    p = tmp_path / "imu.csv"
    p.write_text("t,gx,gy\n0,0,0\n")
    with pytest.raises(vio.ValidationError, match="expected header"):
        vio.read_imu(p)
    p.write_text("t,gx,gy,gz,ax,ay,az\n0,0,0,0,0,0,0\n0,0,0,0,0,0,0\n")
    with pytest.raises(vio.ValidationError, match="increasing"):
        vio.read_imu(p)
    p.write_text("t,gx,gy,gz,ax,ay,az\n0,0,0,0,0,0\n")
    with pytest.raises(vio.ValidationError, match="fields"):
        vio.read_imu(p)
    with pytest.raises(vio.ValidationError, match="cannot read"):
        vio.read_imu(tmp_path / "missing.csv")
    t = tmp_path / "traj.csv"
    t.write_text("t,px,py,pz,qw,qx,qy,qz,vx,vy,vz\n0,0,0,0,2,0,0,0,0,0,0\n")
    with pytest.raises(vio.ValidationError, match="quaternion norm"):
        vio.read_trajectory(t)


def test_config_parsing_errors(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("fx = 1\nbroken line\n")
    with pytest.raises(vio.ValidationError, match="row 2"):
        vio.read_config(p)
    p.write_text("fx = 1\nfx = 2\n")
    with pytest.raises(vio.ValidationError):
        vio.read_config(p)


def test_atomic_write_leaves_no_temp_files(tmp_path):
    vio.atomic_write_text(tmp_path / "a.txt", "one")
    vio.atomic_write_text(tmp_path / "a.txt", "two")
    assert (tmp_path / "a.txt").read_text() == "two"
    assert [p.name for p in tmp_path.iterdir()] == ["a.txt"]
