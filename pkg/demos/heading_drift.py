"""Heading drift with and without magnetometer factors.

Runs the realistic-noise circuit (gyro bias random walk, 1 px features at
2 Hz, 0.005 field noise) in both estimator modes and prints the final yaw
error and the yaw RPE over several segment lengths. Pass a duration in
seconds as the first argument; the default of 120 s takes about a minute.

    python demos/heading_drift.py 120 [seed] [independent|correlated]
"""
import sys
import time
from dataclasses import replace

from vimo.estimator import run_sequence
from vimo.evaluation import ate, final_yaw_error, rpe_yaw
from vimo.scenarios import cave_drift
from vimo.simulator import simulate

duration = float(sys.argv[1]) if len(sys.argv) > 1 else 120.0
seed = int(sys.argv[2]) if len(sys.argv) > 2 else 0
weighting = sys.argv[3] if len(sys.argv) > 3 else "independent"

model, sim, run_config = cave_drift(duration, seed)
ds = simulate(model, sim)
L = ds.groundtruth.path_length()[-1]
segments = [L / 8, L / 4, L / 2]
print(f"{duration:.0f} s, path {L:.0f} m, {len(ds.tracks.frame_times)} frames, mag weighting {weighting}")
for mode in ("vio", "vio_mag"):
    cfg = run_config(mode)
    cfg = replace(cfg, optimizer=replace(cfg.optimizer, mag_weighting=weighting))
    tic = time.perf_counter()
    tr = run_sequence(ds, cfg)
    a = ate(tr, ds.groundtruth, "se3")
    rpe = rpe_yaw(tr, ds.groundtruth, segments)
    print(f"{mode:8s} {time.perf_counter() - tic:5.1f} s  ATE {a.rmse_trans:.3f} m / {a.rmse_rot:.3f} deg  "
          f"final yaw {final_yaw_error(tr, ds.groundtruth):.3f} deg  RPE "
          + "  ".join(f"{s.length:.0f} m: {s.mean:.3f}" for s in rpe))
