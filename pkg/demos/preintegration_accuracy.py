"""How close midpoint preintegration gets to the true relative motion.

Integrates noise-free IMU samples of a wobbling Lissajous trajectory over
intervals of increasing length and IMU rate, then compares the predicted
pose with ground truth. The error falls roughly quadratically with the
sample period.

    python demos/preintegration_accuracy.py
"""
import numpy as np

from vimo.imu import GRAVITY, ImuNoiseParams, ImuSample, SystemState, predict_state, preintegrate
from vimo.simulator import TrajectoryModel, evaluate
from vimo.so3 import log_so3, matrix_to_quat

model = TrajectoryModel("lissajous", 30.0, wobble_amp=0.25, wobble_freq=1.2, yaw_amp=0.9, yaw_freq=0.5)
t0 = 5.0
print(f"{'rate':>6} {'interval':>9} {'pos err [m]':>12} {'rot err [rad]':>14}")
for rate in (50.0, 100.0, 200.0, 400.0):
    for length in (0.1, 0.5, 2.0):
        t = t0 + np.arange(int(round(length * rate)) + 1) / rate
        g = evaluate(model, t)
        f = np.einsum("nji,nj->ni", g.R, g.a - GRAVITY)
        pre = preintegrate([ImuSample(*x) for x in zip(t, g.omega, f)], np.zeros(3), np.zeros(3),
                           ImuNoiseParams(rate=rate))
        x0 = SystemState(g.p[0], matrix_to_quat(g.R[0]), g.v[0], np.zeros(3), np.zeros(3))
        x1 = predict_state(pre, x0, GRAVITY)
        ep = np.linalg.norm(x1.p - g.p[-1])
        er = np.linalg.norm(log_so3(x1.R.T @ g.R[-1]))
        print(f"{rate:6.0f} {length:9.1f} {ep:12.2e} {er:14.2e}")
