import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vimo.estimator import (DenseSystem, MarginalizationPrior, NumericalFailure, OptimizerConfig,
                            RunConfig, TimestampRegressionError, levenberg_marquardt,
                            prior_from_information, run_sequence, schur_complement)
from vimo.estimator import pipeline, window as W
from vimo.evaluation import ate
from vimo.imu import SystemState
from vimo.simulator import SimConfig, TrajectoryModel, simulate


# ---------------------------------------------------------------- linear algebra

@settings(max_examples=30)
@given(st.integers(0, 10_000), st.integers(1, 5))
def test_schur_matches_block_elimination(seed, m):
    rng = np.random.default_rng(seed)
    J = rng.normal(size=(20, 8))
    H, b = J.T @ J, J.T @ rng.normal(size=20)
    marg = list(range(m))
    Hs, bs, keep = schur_complement(H, b, marg)
    x_full = np.linalg.solve(H, -b)
    assert np.allclose(np.linalg.solve(Hs, -bs), x_full[keep], atol=1e-9)
    J0, r0 = prior_from_information(Hs, bs)
    assert np.allclose(J0.T @ J0, Hs, atol=1e-9) and np.allclose(J0.T @ r0, bs, atol=1e-9)


def test_schur_drops_unobservable_directions():
    H = np.diag([4.0, 0.0, 2.0])
    H[0, 2] = H[2, 0] = 1.0
    Hs, bs, keep = schur_complement(H, np.array([1.0, 0.0, 1.0]), [1])
    assert np.all(np.isfinite(Hs)) and list(keep) == [0, 2]


class _Quadratic:
    """Rosenbrock-style least squares on R^2."""

    def residual(self, x):
        return np.array([10 * (x[1] - x[0] ** 2), 1 - x[0]])

    def cost(self, x):
        r = self.residual(x)
        return float(r @ r)

    def linearize(self, x):
        J = np.array([[-20 * x[0], 10.0], [-1.0, 0.0]])
        r = self.residual(x)
        return DenseSystem(J.T @ J, J.T @ r, float(r @ r))

    def retract(self, x, dx):
        return x + dx


@pytest.mark.parametrize("lam", [0.0, 1e-4, 1.0])
def test_lm_monotone_and_converges(lam):
    cfg = OptimizerConfig(max_iterations=100, lm_initial_lambda=lam, convergence_tol=1e-14, abs_tol=1e-20)
    x, rep = levenberg_marquardt(_Quadratic(), np.array([-1.2, 1.0]), cfg)
    assert np.all(np.diff(rep.costs) <= 0)
    assert np.allclose(x, [1, 1], atol=1e-6)


def test_lm_rejects_non_finite_cost():
    class Bad(_Quadratic):
        def cost(self, x):
            return float("nan")
    with pytest.raises(NumericalFailure):
        levenberg_marquardt(Bad(), np.zeros(2), OptimizerConfig())


def test_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(M_kf=1)
    with pytest.raises(ValueError):
        OptimizerConfig(mag_weighting="bogus")
    with pytest.raises(ValueError):
        RunConfig(mode="vo")
    with pytest.raises(ValueError):
        MarginalizationPrior(np.zeros((1, 15)), np.zeros(1), [], [])


# ---------------------------------------------------------------- window

def short_dataset(duration=12.0, **noise):
    model = TrajectoryModel("circle", duration, radius=5.0, rate=0.2, rest=1.0)
    return simulate(model, SimConfig(cam_rate=10, seed=0, **noise))


def test_window_size_and_invariants(monkeypatch):
    ds = short_dataset(sigma_px=0.5, sigma_g=2e-4, sigma_m=0.005)
    cfg = RunConfig(mode="vio_mag", optimizer=OptimizerConfig(M_kf=5, M_recent=2))
    sizes = []
    orig = pipeline.marginalize

    def checked(window, config=None):
        out = orig(window, config)
        window.check_invariants()
        sizes.append(len(window.states))
        return out
    monkeypatch.setattr(pipeline, "marginalize", checked)
    run_sequence(ds, cfg)
    assert max(sizes) <= 5 + 2
    assert sizes[-1] >= 5


def test_timestamp_regression_rejected():
    cam = SimConfig().camera
    w = W.FactorGraphWindow(cam)
    W.add_frame(w, 0, 1.0, SystemState.identity(1.0))
    seg = (np.array([0.5, 1.0]), np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(TimestampRegressionError):
        W.add_frame(w, 1, 0.5, None, seg)


@pytest.mark.parametrize("mode", ["vio", "vio_mag"])
def test_noise_free_run_is_exact(mode):
    ds = short_dataset()
    tr = run_sequence(ds, RunConfig(mode=mode))
    res = ate(tr, ds.groundtruth, "se3")
    assert res.rmse_trans < 1e-3 and res.rmse_rot < 0.05


def test_mag_weightings_agree_on_clean_data():
    ds = short_dataset(8.0, sigma_m=1e-4, sigma_px=0.2)
    out = {}
    for mw in ("independent", "correlated"):
        cfg = RunConfig(mode="vio_mag", optimizer=OptimizerConfig(mag_weighting=mw))
        out[mw] = ate(run_sequence(ds, cfg), ds.groundtruth, "se3")
    assert out["independent"].rmse_trans < 0.05 and out["correlated"].rmse_trans < 0.05


@pytest.mark.parametrize("weighting", ["independent", "correlated"])
def test_window_gradient_matches_cost(monkeypatch, weighting):
    ds = short_dataset(6.0, sigma_px=0.5, sigma_g=1e-3, sigma_m=0.01)
    captured = {}
    orig = pipeline.optimize

    def grab(window, config=None):
        captured["w"] = window
        return orig(window, config)
    monkeypatch.setattr(pipeline, "optimize", grab)
    run_sequence(ds, RunConfig(mode="vio_mag", optimizer=OptimizerConfig(mag_weighting=weighting)))
    w = captured["w"]
    lm = W._active_landmarks(w)
    prob = W._WindowProblem(w, lm, W._observations(w, lm))
    rng = np.random.default_rng(1)
    v = prob.values()
    v = prob.retract(v, rng.normal(size=15 * len(v.states) + 3 * len(v.lms)) * 1e-3)
    H, b = prob.linearize(v).dense()
    eps = 1e-6
    for _ in range(3):
        d = rng.normal(size=len(b))
        num = (prob.cost(prob.retract(v, eps * d)) - prob.cost(prob.retract(v, -eps * d))) / (2 * eps)
        assert abs(num - 2 * b @ d) < 1e-5 * max(abs(num), 1.0)


def test_missing_magnetometer_is_configuration_error():
    ds = short_dataset()
    ds = dataclasses.replace(ds, mag=None, mag_t=None)
    with pytest.raises(ValueError):
        run_sequence(ds, RunConfig(mode="vio_mag"))
    run_sequence(dataclasses.replace(ds, groundtruth=None), RunConfig(mode="vio"))
