"""Levenberg-Marquardt on manifold, Schur complements and the marginalization prior."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from ..imu import SQ, SystemState
from ..so3 import right_jacobian_inv

STATE_DIM = 15


class NumericalFailure(RuntimeError):
    """Non-finite cost or an unsolvable linear system."""

    def __init__(self, message: str, factor: str | None = None):
        super().__init__(message if factor is None else f"{message} (factor {factor})")
        self.factor = factor


@dataclass(frozen=True)
class OptimizerConfig:
    max_iterations: int = 10
    lm_initial_lambda: float = 1e-4   # 0 gives undamped Gauss-Newton steps
    lm_lambda_bounds: tuple = (1e-9, 1e4)
    huber_threshold_px: float = 2.0
    convergence_tol: float = 1e-6    # relative cost decrease
    abs_tol: float = 1e-6            # absolute cost decrease (whitened units)
    M_kf: int = 7
    M_recent: int = 3
    mag_stride: int = 1
    mag_weighting: str = "independent"   # or "correlated": account for the shared reference sample
    repropagation_thresholds: tuple = (0.01, 0.1)
    keyframe_overlap: float = 0.6
    keyframe_translation: float = 0.3
    min_parallax_deg: float = 1.0
    cost_floor: float = 1e-18

    def __post_init__(self):
        lo, hi = self.lm_lambda_bounds
        if not (self.max_iterations > 0 and self.huber_threshold_px > 0
                and self.convergence_tol > 0 and self.mag_stride >= 1
                and self.M_recent >= 1 and 0 < lo < hi
                and min(self.repropagation_thresholds) > 0
                and self.keyframe_translation > 0 and 0 < self.keyframe_overlap <= 1):
            raise ValueError("optimizer settings must be positive")
        if self.mag_weighting not in ("independent", "correlated"):
            raise ValueError("mag_weighting must be 'independent' or 'correlated'")
        if self.M_kf < 2:
            raise ValueError("M_kf must be at least 2")
        if self.lm_initial_lambda < 0:
            raise ValueError("lm_initial_lambda must be non-negative")


# ---------------------------------------------------------------- prior

@dataclass
class MarginalizationPrior:
    """Linear prior e = r0 + J0 (x ⊟ x_lin) over a set of frame states."""
    J0: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    r0: np.ndarray = field(default_factory=lambda: np.zeros(0))
    linearization_states: list = field(default_factory=list)
    state_ids: list = field(default_factory=list)

    def __post_init__(self):
        self.J0 = np.asarray(self.J0, dtype=float).reshape(len(self.r0), -1) \
            if len(self.r0) else np.zeros((0, STATE_DIM * len(self.state_ids)))
        self.r0 = np.asarray(self.r0, dtype=float)
        if self.J0.shape[1] != STATE_DIM * len(self.state_ids):
            raise ValueError("prior Jacobian does not match its state count")
        if len(self.linearization_states) != len(self.state_ids):
            raise ValueError("one linearization state per prior state required")

    @property
    def dim(self) -> int:
        return len(self.r0)

    def residual(self, states: Sequence[SystemState]) -> np.ndarray:
        if not self.dim:
            return np.zeros(0)
        delta = np.concatenate([x.boxminus(x0) for x, x0 in zip(states, self.linearization_states)])
        return self.r0 + self.J0 @ delta

    def jacobian(self, states: Sequence[SystemState]) -> np.ndarray:
        """J0 with the rotation columns mapped to right perturbations of ``states``."""
        J = self.J0.copy()
        for i, (x, x0) in enumerate(zip(states, self.linearization_states)):
            dth = x.boxminus(x0)[SQ]
            cols = slice(STATE_DIM * i + SQ.start, STATE_DIM * i + SQ.stop)
            J[:, cols] = J[:, cols] @ right_jacobian_inv(dth)
        return J

    def information(self) -> np.ndarray:
        return self.J0.T @ self.J0


def schur_complement(H: np.ndarray, b: np.ndarray, marg: Sequence[int], rel_eps: float = 1e-12):
    """Eliminate the ``marg`` indices from (H, b); returns (H*, b*, keep).

    H_mm is inverted through its eigendecomposition so unobservable
    directions of the marginalized block are dropped instead of blowing up.
    """
    n = len(b)
    marg = np.asarray(sorted(set(int(i) for i in marg)), dtype=int)
    keep = np.setdiff1d(np.arange(n), marg)
    if len(marg) == 0:
        return H.copy(), b.copy(), keep
    Hmm = H[np.ix_(marg, marg)]
    Hmk = H[np.ix_(marg, keep)]
    lam, V = np.linalg.eigh(0.5 * (Hmm + Hmm.T))
    tol = rel_eps * max(lam.max(initial=0.0), 1e-300)
    inv = np.where(lam > tol, 1.0 / np.where(lam > tol, lam, 1.0), 0.0)
    Hmm_inv = (V * inv) @ V.T
    Hs = H[np.ix_(keep, keep)] - Hmk.T @ Hmm_inv @ Hmk
    bs = b[keep] - Hmk.T @ Hmm_inv @ b[marg]
    return 0.5 * (Hs + Hs.T), bs, keep


def prior_from_information(H: np.ndarray, b: np.ndarray, rel_eps: float = 1e-12):
    """Factor (H, b) into (J0, r0) with J0^T J0 = H and J0^T r0 = b."""
    lam, V = np.linalg.eigh(0.5 * (H + H.T))
    tol = rel_eps * max(lam.max(initial=0.0), 1e-300)
    ok = lam > tol
    s = np.sqrt(lam[ok])
    J0 = s[:, None] * V[:, ok].T
    r0 = (V[:, ok].T @ b) / s
    return J0, r0


# ---------------------------------------------------------------- LM

class LinearSystem(Protocol):
    cost: float

    def solve(self, lam: float) -> np.ndarray: ...


class Problem(Protocol):
    def cost(self, values) -> float: ...

    def linearize(self, values) -> LinearSystem: ...

    def retract(self, values, delta: np.ndarray): ...


@dataclass
class DenseSystem:
    """H dx = -b with Marquardt damping on the diagonal."""
    H: np.ndarray
    b: np.ndarray
    cost: float

    def solve(self, lam: float) -> np.ndarray:
        return -damped_solve(self.H, self.b, lam)


def damped_solve(H: np.ndarray, b: np.ndarray, lam: float) -> np.ndarray:
    A = H.copy()
    if lam > 0:
        d = np.clip(np.diag(H), 1e-12, None)
        A[np.diag_indices_from(A)] += lam * d
    c = cho_factor(A, lower=True, check_finite=True)
    return cho_solve(c, b)


@dataclass
class LMReport:
    iterations: int = 0
    initial_cost: float = 0.0
    final_cost: float = 0.0
    costs: list = field(default_factory=list)
    final_lambda: float = 0.0
    converged: bool = False


def levenberg_marquardt(problem: Problem, values, config: OptimizerConfig,
                        before_iteration=None):
    """Minimize ``problem`` from ``values``; returns (values, LMReport).

    Accepted steps never increase the cost. ``before_iteration(values)`` may
    refresh factor linearizations (e.g. IMU repropagation) and returns
    True if it changed the cost function.
    """
    lo, hi = config.lm_lambda_bounds
    lam = config.lm_initial_lambda
    cost = problem.cost(values)
    rep = LMReport(initial_cost=cost, costs=[cost])
    if not np.isfinite(cost):
        raise NumericalFailure("non-finite initial cost")
    for it in range(config.max_iterations):
        if before_iteration is not None and before_iteration(values):
            cost = problem.cost(values)
        if cost <= config.cost_floor:
            rep.converged = True
            break
        lin = problem.linearize(values)
        accepted = False
        while True:
            try:
                dx = lin.solve(lam)
                cand = problem.retract(values, dx)
                new_cost = problem.cost(cand)
            except (LinAlgError, np.linalg.LinAlgError):
                new_cost = np.inf
            if np.isfinite(new_cost) and new_cost <= cost:
                accepted = True
                break
            if lam >= hi:
                break
            lam = min(max(lam * 10.0, lo), hi)
        rep.iterations = it + 1
        if not accepted:
            rep.converged = True   # no descent direction left at maximum damping
            break
        assert new_cost <= cost
        cost_drop = cost - new_cost
        rel = cost_drop / max(cost, 1e-300)
        values, cost = cand, new_cost
        rep.costs.append(cost)
        if lam > 0:
            lam = max(lam / 10.0, lo)
        if rel < config.convergence_tol or cost_drop < config.abs_tol:
            rep.converged = True
            break
    rep.final_cost = cost
    rep.final_lambda = lam
    return values, rep
