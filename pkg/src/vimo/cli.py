"""Command line interface: simulate, calibrate-mag, run, evaluate, allan.

Exit codes: 0 success, 1 invalid input or configuration, 2 numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import io as vio
from .estimator import (ConfigurationError, DatasetFormatError, NumericalFailure, OptimizerConfig,
                        RunConfig, SequenceStats, TimestampRegressionError, run_sequence)
from .evaluation import AssociationError, DegenerateAlignmentError, ate, rpe_yaw
from .imu import ImuNoiseParams
from .magnetometer import (MagCalibrationError, MagNoiseParams, allan_deviation, fit_ellipsoid,
                           fit_hard_iron, octant_coverage)
from .scenarios import cave_drift, zero_noise_circle
from .simulator import SimConfig, TrajectoryModel, simulate

log = logging.getLogger("vimo")

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2

VALIDATION_ERRORS = (vio.ValidationError, DatasetFormatError, ConfigurationError,
                     MagCalibrationError, AssociationError, DegenerateAlignmentError,
                     TimestampRegressionError)


# ---------------------------------------------------------------- config plumbing

def _coerce(cfg: vio.ConfigDict, key: str, default):
    raw = cfg[key]
    if isinstance(default, bool):
        if raw.lower() not in ("true", "false"):
            raise cfg.error(key, f"expected true or false, got {raw!r}")
        return raw.lower() == "true"
    if isinstance(default, int):
        return cfg.number(key, integer=True)
    if isinstance(default, float) or default is None:
        if default is None and raw.lower() == "none":
            return None
        return cfg.number(key)
    if isinstance(default, str):
        return raw
    if isinstance(default, tuple):
        shape = np.asarray(default, dtype=float).shape
        vals = cfg.vector(key, int(np.prod(shape)))
        return _as_tuple(vals.reshape(shape))
    raise cfg.error(key, "this setting cannot be configured from a file")


def _as_tuple(a: np.ndarray):
    return tuple(_as_tuple(x) for x in a) if a.ndim > 1 else tuple(float(x) for x in a)


def _field_defaults(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)}


def _apply(obj, cfg: vio.ConfigDict, used: set, prefix: str = "", skip=()):
    """Replace the fields of dataclass ``obj`` named ``prefix + field`` in ``cfg``."""
    changes = {}
    for name, default in _field_defaults(obj).items():
        key = prefix + name
        if name in skip or key not in cfg:
            continue
        changes[name] = _coerce(cfg, key, default)
        used.add(key)
    if not changes:
        return obj
    try:
        return dataclasses.replace(obj, **changes)
    except (ValueError, TypeError) as exc:
        key = prefix + next(iter(changes))
        raise vio.ValidationError(str(exc), cfg.path, cfg.lines.get(key)) from None


def _reject_unknown(cfg: vio.ConfigDict, used: set):
    for key in cfg:
        if key not in used:
            raise cfg.error(key, "unknown setting")


def load_sim_config(path, seed: int | None):
    """TrajectoryModel and SimConfig from a config file, optionally based on a named scenario."""
    cfg = vio.read_config(path) if path else vio.ConfigDict({})
    used = {"scenario"}
    scenario = cfg.get("scenario", "zero_noise_circle")
    if scenario == "zero_noise_circle":
        model, sim = zero_noise_circle()
    elif scenario == "cave_drift":
        model, sim, _ = cave_drift()
    elif scenario == "none":
        model, sim = TrajectoryModel(), SimConfig()
    else:
        raise cfg.error("scenario", f"unknown scenario {scenario!r}")
    model = _apply(model, cfg, used)
    sim = _apply(sim, cfg, used, skip=("camera",))
    _reject_unknown(cfg, used)
    if seed is not None:
        sim = dataclasses.replace(sim, seed=seed)
    return model, sim


def load_run_config(path, mode: str | None, seed: int | None) -> RunConfig:
    """RunConfig from flat keys: RunConfig and OptimizerConfig fields by name,
    IMU noise as ``imu_<field>`` and the magnetometer noise as ``sigma_m``."""
    cfg = vio.read_config(path) if path else vio.ConfigDict({})
    used = set()
    base = RunConfig()
    opt = _apply(base.optimizer, cfg, used)
    imu = _apply(base.imu_noise, cfg, used, prefix="imu_")
    mag = _apply(base.mag_noise, cfg, used)
    rc = _apply(base, cfg, used, skip=("optimizer", "imu_noise", "mag_noise"))
    _reject_unknown(cfg, used)
    changes = dict(optimizer=opt, imu_noise=imu, mag_noise=mag)
    if mode is not None:
        changes["mode"] = mode
    if seed is not None:
        changes["seed"] = seed
    return dataclasses.replace(rc, **changes)


# ---------------------------------------------------------------- commands

def cmd_simulate(args) -> int:
    model, sim = load_sim_config(args.config, args.seed)
    ds = simulate(model, sim)
    vio.write_dataset(args.out, ds)
    gt = ds.groundtruth
    print(f"wrote {args.out}")
    print(f"duration      {model.duration:.3f} s")
    print(f"path length   {gt.path_length()[-1]:.3f} m")
    print(f"imu samples   {len(ds.imu_t)}")
    print(f"mag samples   {len(ds.mag_t) if ds.has_mag else 0}")
    print(f"frames        {len(ds.tracks.frame_times)}")
    print(f"observations  {len(ds.tracks)}")
    return EXIT_OK


def cmd_calibrate_mag(args) -> int:
    _, m = vio.read_mag(args.input)
    fit = fit_ellipsoid if args.mode == "full" else fit_hard_iron
    cal = fit(m)
    corrected = cal.correct(m)
    norms = np.linalg.norm(corrected, axis=1)
    dev = norms - 1.0
    vio.write_magcal(args.out, cal)
    print(f"calibration ({args.mode}) written to {args.out}")
    print(f"samples             {len(m)}")
    print(f"octant coverage     {octant_coverage(m - cal.h)}/8")
    print(f"|m| - 1 mean        {dev.mean():+.3e}")
    print(f"|m| - 1 std         {dev.std():.3e}")
    print(f"|m| - 1 max abs     {np.abs(dev).max():.3e}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_run_config(args.config, args.mode, args.seed)
    ds = vio.read_dataset(args.dataset)
    stats = SequenceStats()
    tic = time.perf_counter()
    traj = run_sequence(ds, cfg, stats)
    elapsed = time.perf_counter() - tic
    vio.write_trajectory(args.out, traj)
    ft = np.array(stats.frame_seconds) * 1e3
    print(f"mode {cfg.mode}: {stats.frames} frames, {stats.keyframes} keyframe poses -> {args.out}")
    if len(ft):
        print(f"per-window time [ms]  mean {ft.mean():.1f}  median {np.median(ft):.1f}  max {ft.max():.1f}")
    if stats.iterations:
        print(f"LM iterations         mean {np.mean(stats.iterations):.2f}")
    print(f"final window cost     {stats.final_cost:.6g}")
    print(f"total time            {elapsed:.2f} s")
    return EXIT_OK


def _segments(text: str | None, path_length: float):
    if text:
        try:
            segs = [float(s) for s in text.split(",") if s.strip()]
        except ValueError:
            raise vio.ValidationError(f"segment lengths must be numbers, got {text!r}") from None
        return segs
    return [path_length * f for f in (0.1, 0.25, 0.5)]


def cmd_evaluate(args) -> int:
    est = vio.read_trajectory(args.estimate)
    ref = vio.read_trajectory(args.reference)
    res = ate(est, ref, args.align, args.max_dt)
    try:
        segs = _segments(args.segments, ref.path_length()[-1])
        rpe = rpe_yaw(est, ref, segs, args.max_dt)
    except ValueError as exc:
        raise vio.ValidationError(str(exc)) from None
    print(f"ATE ({args.align}, {res.n_pairs} poses, geodesic rotation): "
          f"{res.rmse_rot:.2f}\N{DEGREE SIGN}/{res.rmse_trans:.2f}m")
    print(f"{'segment [m]':>12} {'count':>6} {'mean [deg]':>11} {'median [deg]':>13} {'rmse [deg]':>11}")
    for s in rpe:
        print(f"{s.length:12.3f} {s.count:6d} {s.mean:11.4f} {s.median:13.4f} {s.rmse:11.4f}")
    if args.out:
        comments = [
            "yaw relative pose error per segment length",
            f"ate_alignment = {args.align}",
            f"ate_rotation_metric = geodesic",
            f"ate_rotation_rmse_deg = {vio.fmt(res.rmse_rot)}",
            f"ate_translation_rmse_m = {vio.fmt(res.rmse_trans)}",
            f"ate_pairs = {res.n_pairs}",
        ]
        vio.write_csv(args.out, ("segment_m", "count", "mean_deg", "median_deg", "rmse_deg"),
                      [(s.length, s.count, s.mean, s.median, s.rmse) for s in rpe], comments)
    return EXIT_OK


def allan_taus(n: int, rate: float, count: int = 25) -> np.ndarray:
    """Log-spaced cluster times with at least three clusters each."""
    m_max = n // 3
    if m_max < 1:
        raise vio.ValidationError(f"{n} samples are too few for any averaging time (need at least 3)")
    m = np.unique(np.round(np.logspace(0.0, np.log10(m_max), count)).astype(int))
    return m / rate


def cmd_allan(args) -> int:
    path = Path(args.input)
    header = None
    for line in path.read_text().splitlines() if path.is_file() else []:
        if line.strip() and not line.lstrip().startswith("#"):
            header = [h.strip() for h in line.split(",")]
            break
    if not header:
        raise vio.ValidationError("file is empty or missing", path)
    if header[0] != "t":
        raise vio.ValidationError("first column must be 't'", path, 1, header[0])
    data = vio.read_csv(path, header)
    t = data["t"]
    if len(t) < 2:
        raise vio.ValidationError(f"{len(t)} samples are too few for any averaging time", path)
    dt = np.diff(t)
    nominal = float(np.median(dt))
    if not nominal > 0:
        raise vio.ValidationError("timestamps must be increasing", path, column="t")
    jitter = np.abs(dt - nominal) / nominal
    if jitter.max() > 0.01:
        k = int(np.argmax(jitter))
        raise vio.ValidationError(f"non-uniform sampling: interval {dt[k]:.6g} s vs nominal "
                                  f"{nominal:.6g} s exceeds 1% jitter", path, k + 3, "t")
    rate = 1.0 / nominal
    cols = [args.column] if args.column else header[1:]
    for c in cols:
        if c not in data or c == "t":
            raise vio.ValidationError(f"no data column {c!r}", path, 1)
    taus = allan_taus(len(t), rate)
    rows = []
    per_col = {c: allan_deviation(data[c], rate, taus) for c in cols}
    for i, tau in enumerate(taus):
        rows.append([per_col[cols[0]][i][0]] + [per_col[c][i][1] for c in cols])
    vio.write_csv(args.out, ["tau"] + cols, rows, [f"overlapping Allan deviation, rate {rate:.6g} Hz"])
    print(f"{len(taus)} averaging times from {taus[0]:.4g} s to {taus[-1]:.4g} s -> {args.out}")
    for c in cols:
        tau, dev = np.array(per_col[c]).T
        ok = dev > 0
        if ok.sum() >= 2:
            slope = np.polyfit(np.log10(tau[ok]), np.log10(dev[ok]), 1)[0]
            print(f"{c}: deviation at tau={tau[0]:.4g} s is {dev[0]:.4g}, log-log slope {slope:+.3f}")
        else:
            print(f"{c}: constant signal, deviation 0")
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vimo", description="Visual-inertial-magnetometer odometry toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic dataset directory")
    s.add_argument("--config", help="simulation config (key = value)")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--seed", type=int, help="override the config seed")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("calibrate-mag", help="fit soft/hard-iron calibration to raw samples")
    s.add_argument("input", help="mag CSV (t,mx,my,mz)")
    s.add_argument("--mode", choices=("full", "hard_iron"), default="full")
    s.add_argument("--out", required=True, help="output magcal.cfg")
    s.set_defaults(func=cmd_calibrate_mag)

    s = sub.add_parser("run", help="run the estimator on a dataset directory")
    s.add_argument("dataset", help="dataset directory")
    s.add_argument("--config", help="run config (key = value)")
    s.add_argument("--mode", choices=("vio", "vio_mag"), help="override the config mode")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True, help="output trajectory CSV")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("evaluate", help="ATE and yaw RPE of an estimate against a reference")
    s.add_argument("estimate")
    s.add_argument("reference")
    s.add_argument("--align", choices=("sim3", "se3", "none"), default="sim3")
    s.add_argument("--segments", help="comma-separated RPE segment lengths [m]")
    s.add_argument("--max-dt", type=float, default=0.01, help="timestamp association tolerance [s]")
    s.add_argument("--out", help="plot-ready RPE CSV")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("allan", help="overlapping Allan deviation of CSV columns")
    s.add_argument("input", help="CSV whose first column is t")
    s.add_argument("--column", help="single column (default: all)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_allan)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors; 2 is reserved for numerical failures here
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericalFailure, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
