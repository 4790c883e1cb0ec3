"""Dataset directory, CSV and key-value config serialization.

Numbers are written with ``repr`` (shortest round-trip form), so reading a
file back reproduces the in-memory float values exactly. Every write goes
to a temporary file in the target directory which is then renamed over the
destination.
"""
from __future__ import annotations

import csv
import io
import math
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dataset import Dataset, TrackTable
from .magnetometer import MagCalibration
from .trajectory import Trajectory
from .vision import CameraModel

IMU_COLUMNS = ("t", "gx", "gy", "gz", "ax", "ay", "az")
MAG_COLUMNS = ("t", "mx", "my", "mz")
TRACK_COLUMNS = ("frame_id", "t", "landmark_id", "u", "v")
TRAJECTORY_COLUMNS = ("t", "px", "py", "pz", "qw", "qx", "qy", "qz", "vx", "vy", "vz")


class ValidationError(ValueError):
    """Malformed input, located by file, row and column where possible."""

    def __init__(self, message: str, path=None, row: int | None = None, column: str | None = None):
        where = []
        if path is not None:
            where.append(str(path))
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column '{column}'")
        super().__init__(": ".join([", ".join(where), message]) if where else message)
        self.path, self.row, self.column = path, row, column


# ---------------------------------------------------------------- primitives

def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_csv(path, columns: Sequence[str], rows: Iterable[Sequence], comments: Sequence[str] = ()) -> None:
    buf = io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    buf.write(",".join(columns) + "\n")
    for r in rows:
        buf.write(",".join(fmt(x) for x in r) + "\n")
    atomic_write_text(path, buf.getvalue())


def read_csv(path, columns: Sequence[str], int_columns: Sequence[str] = (), min_rows: int = 0):
    """Parse a headed numeric CSV into a dict of column arrays.

    Lines starting with '#' are ignored. Row numbers in errors count file
    lines from 1, header included.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read file ({exc.strerror})", path) from exc
    lines = [(i + 1, ln) for i, ln in enumerate(text.splitlines())
             if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise ValidationError("file is empty", path)
    hrow, header = lines[0]
    got = [h.strip() for h in next(csv.reader([header]))]
    if got != list(columns):
        raise ValidationError(f"expected header {','.join(columns)}, got {','.join(got)}", path, hrow)
    data = {c: [] for c in columns}
    for lineno, ln in lines[1:]:
        cells = next(csv.reader([ln]))
        if len(cells) != len(columns):
            raise ValidationError(f"expected {len(columns)} fields, got {len(cells)}", path, lineno)
        for c, cell in zip(columns, cells):
            data[c].append(_parse_number(cell.strip(), c in int_columns, path, lineno, c))
    if len(lines) - 1 < min_rows:
        raise ValidationError(f"need at least {min_rows} data rows, got {len(lines) - 1}", path)
    return {c: np.array(v, dtype=int if c in int_columns else float) for c, v in data.items()}


def _parse_number(cell: str, integer: bool, path, row, column):
    try:
        x = int(cell) if integer else float(cell)
    except ValueError:
        kind = "an integer" if integer else "a number"
        raise ValidationError(f"not {kind}: {cell!r}", path, row, column) from None
    if not integer and not math.isfinite(x):
        raise ValidationError(f"non-finite value {cell!r}", path, row, column)
    return x


def _check_increasing(t: np.ndarray, path, strict: bool = True, column: str = "t") -> None:
    d = np.diff(t)
    bad = np.flatnonzero(d <= 0) if strict else np.flatnonzero(d < 0)
    if len(bad):
        raise ValidationError("timestamps must be increasing", path, int(bad[0]) + 3, column)


# ---------------------------------------------------------------- key = value

def parse_config_text(text: str, path=None) -> dict:
    """Flat ``key = value`` lines; '#' starts a comment. Values stay strings."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError("expected 'key = value'", path, lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if not key or not value:
            raise ValidationError("empty key or value", path, lineno)
        if key in out:
            raise ValidationError(f"duplicate key {key!r}", path, lineno)
        out[key] = value
    return out


def read_config(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ValidationError(f"cannot read file ({exc.strerror})", path) from exc
    cfg = parse_config_text(text, path)
    # remember line numbers for located value errors
    lines = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        if "=" in line:
            lines.setdefault(line.split("=", 1)[0].strip(), lineno)
    return ConfigDict(cfg, path, lines)


class ConfigDict(dict):
    """Config mapping that can point at the line a key came from."""

    def __init__(self, data: dict, path=None, lines: dict | None = None):
        super().__init__(data)
        self.path = path
        self.lines = lines or {}

    def error(self, key: str, message: str) -> ValidationError:
        return ValidationError(message, self.path, self.lines.get(key), key)

    def number(self, key: str, integer: bool = False):
        return _parse_number(self[key], integer, self.path, self.lines.get(key), key)

    def vector(self, key: str, n: int | None = None) -> np.ndarray:
        parts = [p.strip() for p in self[key].split(",")]
        vals = np.array([_parse_number(p, False, self.path, self.lines.get(key), key) for p in parts])
        if n is not None and len(vals) != n:
            raise self.error(key, f"expected {n} comma-separated values, got {len(vals)}")
        return vals


def format_config(items: Sequence[tuple[str, object]], comments: Sequence[str] = ()) -> str:
    out = [f"# {c}" for c in comments]
    for k, v in items:
        if isinstance(v, (np.ndarray, list, tuple)):
            v = ", ".join(fmt(x) for x in np.asarray(v, dtype=float).reshape(-1))
        elif not isinstance(v, str):
            v = fmt(v)
        out.append(f"{k} = {v}")
    return "\n".join(out) + "\n"


def write_config(path, items, comments=()) -> None:
    atomic_write_text(path, format_config(items, comments))


# ---------------------------------------------------------------- typed files

def write_magcal(path, cal: MagCalibration, comments=()) -> None:
    write_config(path, [("A", cal.A), ("h", cal.h)],
                 comments or ("magnetometer calibration: m_corrected = A (m_raw - h), A row-major",))


def read_magcal(path) -> MagCalibration:
    cfg = read_config(path)
    for k in ("A", "h"):
        if k not in cfg:
            raise ValidationError(f"missing key {k!r}", path)
    A = cfg.vector("A", 9).reshape(3, 3)
    try:
        return MagCalibration(A, cfg.vector("h", 3))
    except ValueError as exc:
        raise cfg.error("A", str(exc)) from None


def write_camera(path, cam: CameraModel) -> None:
    write_config(path, [("fx", cam.fx), ("fy", cam.fy), ("cx", cam.cx), ("cy", cam.cy),
                        ("width", int(cam.width)), ("height", int(cam.height)),
                        ("R_BC", cam.R_BC), ("t_BC", cam.t_BC)],
                 ("pinhole camera; x_body = R_BC x_cam + t_BC, R_BC row-major",))


def read_camera(path) -> CameraModel:
    cfg = read_config(path)
    for k in ("fx", "fy", "cx", "cy", "width", "height"):
        if k not in cfg:
            raise ValidationError(f"missing key {k!r}", path)
    R = cfg.vector("R_BC", 9).reshape(3, 3) if "R_BC" in cfg else np.eye(3)
    t = cfg.vector("t_BC", 3) if "t_BC" in cfg else np.zeros(3)
    try:
        return CameraModel(cfg.number("fx"), cfg.number("fy"), cfg.number("cx"), cfg.number("cy"),
                           cfg.number("width", True), cfg.number("height", True), R, t)
    except ValueError as exc:
        raise ValidationError(str(exc), path) from None


def write_trajectory(path, traj: Trajectory, comments=()) -> None:
    rows = np.column_stack([traj.t, traj.p, traj.q, traj.v])
    write_csv(path, TRAJECTORY_COLUMNS, rows.tolist(), comments)


def read_trajectory(path) -> Trajectory:
    d = read_csv(path, TRAJECTORY_COLUMNS)
    _check_increasing(d["t"], path)
    q = np.column_stack([d["qw"], d["qx"], d["qy"], d["qz"]])
    norms = np.linalg.norm(q, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > 1e-6)
    if len(bad):
        raise ValidationError(f"quaternion norm {norms[bad[0]]:.6g} is not 1", path, int(bad[0]) + 2, "qw")
    return Trajectory(d["t"], np.column_stack([d["px"], d["py"], d["pz"]]), q,
                      np.column_stack([d["vx"], d["vy"], d["vz"]]))


def write_imu(path, t, gyro, accel) -> None:
    write_csv(path, IMU_COLUMNS, np.column_stack([t, gyro, accel]).tolist())


def read_imu(path):
    d = read_csv(path, IMU_COLUMNS, min_rows=2)
    _check_increasing(d["t"], path)
    return (d["t"], np.column_stack([d["gx"], d["gy"], d["gz"]]),
            np.column_stack([d["ax"], d["ay"], d["az"]]))


def write_mag(path, t, m) -> None:
    write_csv(path, MAG_COLUMNS, np.column_stack([t, m]).tolist())


def read_mag(path):
    d = read_csv(path, MAG_COLUMNS, min_rows=1)
    _check_increasing(d["t"], path)
    return d["t"], np.column_stack([d["mx"], d["my"], d["mz"]])


def write_tracks(path, tracks: TrackTable) -> None:
    """One row per observation; frames without observations get a row with landmark_id -1."""
    rows = []
    seen = set()
    by_frame = {}
    for i in range(len(tracks)):
        by_frame.setdefault(int(tracks.frame_id[i]), []).append(i)
    fids = sorted(by_frame)
    if tracks.frame_times is not None:
        fids = sorted(set(fids) | set(range(len(tracks.frame_times))))
    for fid in fids:
        idx = by_frame.get(fid)
        if not idx:
            rows.append((fid, float(tracks.frame_times[fid]), -1, 0.0, 0.0))
            continue
        for i in idx:
            rows.append((fid, tracks.t[i], int(tracks.landmark_id[i]), tracks.uv[i, 0], tracks.uv[i, 1]))
        seen.add(fid)
    write_csv(path, TRACK_COLUMNS, rows)


def read_tracks(path) -> TrackTable:
    d = read_csv(path, TRACK_COLUMNS, int_columns=("frame_id", "landmark_id"))
    fid, t = d["frame_id"], d["t"]
    _check_increasing(t, path, strict=False)
    step = np.diff(fid)
    bad = np.flatnonzero((step < 0) | ((step == 0) & (np.diff(t) != 0)) | ((step > 0) & (np.diff(t) <= 0)))
    if len(bad):
        raise ValidationError("frame ids must be non-decreasing with one timestamp per frame",
                              path, int(bad[0]) + 3, "frame_id")
    neg = np.flatnonzero(d["landmark_id"] < -1)
    if len(neg):
        raise ValidationError("landmark ids must be >= 0 (or -1 for an empty frame)",
                              path, int(neg[0]) + 2, "landmark_id")
    keep = d["landmark_id"] >= 0
    table = TrackTable(fid[keep], t[keep], d["landmark_id"][keep],
                       np.column_stack([d["u"], d["v"]])[keep])
    frames, first = np.unique(fid, return_index=True)
    if len(frames) and frames[0] == 0 and frames[-1] == len(frames) - 1:
        table.frame_times = t[first]
    return table


# ---------------------------------------------------------------- dataset directory

def write_dataset(directory, ds: Dataset) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_imu(d / "imu.csv", ds.imu_t, ds.gyro, ds.accel)
    if ds.has_mag:
        write_mag(d / "mag.csv", ds.mag_t, ds.mag)
    write_tracks(d / "tracks.csv", ds.tracks)
    write_camera(d / "camera.cfg", ds.camera)
    if ds.magcal is not None:
        write_magcal(d / "magcal.cfg", ds.magcal)
    if ds.groundtruth is not None:
        write_trajectory(d / "groundtruth.csv", ds.groundtruth)
    if ds.mag_calib is not None:
        dt = float(np.median(np.diff(ds.mag_t))) if ds.has_mag and len(ds.mag_t) > 1 else 0.005
        write_mag(d / "mag_calib.csv", np.arange(len(ds.mag_calib)) * dt, ds.mag_calib)


def read_dataset(directory) -> Dataset:
    d = Path(directory)
    if not d.is_dir():
        raise ValidationError("dataset directory does not exist", d)
    for name in ("imu.csv", "tracks.csv", "camera.cfg"):
        if not (d / name).is_file():
            raise ValidationError(f"missing required file {name}", d)
    t, gyro, accel = read_imu(d / "imu.csv")
    mag_t = mag = magcal = gt = calib = None
    if (d / "mag.csv").is_file():
        mag_t, mag = read_mag(d / "mag.csv")
    if (d / "magcal.cfg").is_file():
        magcal = read_magcal(d / "magcal.cfg")
    if (d / "groundtruth.csv").is_file():
        gt = read_trajectory(d / "groundtruth.csv")
    if (d / "mag_calib.csv").is_file():
        calib = read_mag(d / "mag_calib.csv")[1]
    return Dataset(imu_t=t, gyro=gyro, accel=accel, tracks=read_tracks(d / "tracks.csv"),
                   camera=read_camera(d / "camera.cfg"), mag_t=mag_t, mag=mag, magcal=magcal,
                   groundtruth=gt, mag_calib=calib)
