"""Keyframe sliding window: factor bookkeeping, joint cost, marginalization.

State tangent blocks are 15-wide ``[p, theta, v, b_g, b_a]``; landmarks are
3-vectors eliminated with a dense Schur complement before each solve.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from ..imu import (GRAVITY, SBG, SQ, ImuNoiseParams, PreintegratedImu, SystemState,
                   inertial_residual, linearize_inertial, predict_state,
                   residual_information)
from ..magnetometer import MagNoiseParams
from ..so3 import (exp_so3_batch, quat_to_matrix, right_jacobian_batch, skew,
                   skew_batch)
from ..vision import (CameraModel, FeatureObservation, InsufficientBaselineError,
                      Landmark, project_batch, triangulate)
from .solver import (STATE_DIM, MarginalizationPrior, NumericalFailure, OptimizerConfig,
                     damped_solve, levenberg_marquardt, prior_from_information,
                     schur_complement)

log = logging.getLogger(__name__)


class TimestampRegressionError(ValueError):
    pass


class MagSegment(NamedTuple):
    """Calibrated samples in (t_k, t_k1] used as ``j``, plus the reference sample."""
    t: np.ndarray
    m: np.ndarray
    t_ref: float
    m_ref: np.ndarray


@dataclass
class Frame:
    id: int
    t: float
    x: SystemState
    keyframe: bool
    lm_ids: np.ndarray
    uv: np.ndarray

    def __post_init__(self):
        self.lm_ids = np.asarray(self.lm_ids, dtype=int).reshape(-1)
        self.uv = np.asarray(self.uv, dtype=float).reshape(-1, 2)
        self.index = {int(l): i for i, l in enumerate(self.lm_ids)}

    def drop_landmarks(self, ids) -> None:
        keep = ~np.isin(self.lm_ids, np.fromiter(ids, dtype=int, count=len(ids)))
        self.lm_ids, self.uv = self.lm_ids[keep], self.uv[keep]
        self.index = {int(l): i for i, l in enumerate(self.lm_ids)}


@dataclass
class MagPairFactor:
    """All magnetometer residuals attached to one consecutive state pair."""
    t_j: np.ndarray
    m_j: np.ndarray
    m_k1: np.ndarray
    G: np.ndarray = None    # (n, 3, 3) preintegrated rotation to each t_j
    Jg: np.ndarray = None   # (n, 3, 3) its gyro-bias Jacobian

    @classmethod
    def build(cls, seg: MagSegment, pre: PreintegratedImu, stride_mask=None):
        t_j = np.asarray(seg.t, dtype=float)
        m_j = np.asarray(seg.m, dtype=float).reshape(-1, 3)
        # express the reference sample at t_k1 when it is not synchronized
        g_ref, _ = pre.gamma_at(seg.t_ref)
        g_k1, _ = pre.gamma_at(pre.t1)
        m_k1 = quat_to_matrix(g_k1).T @ quat_to_matrix(g_ref) @ np.asarray(seg.m_ref, dtype=float)
        f = cls(t_j, m_j, m_k1)
        f.refresh(pre)
        return f

    def refresh(self, pre: PreintegratedImu) -> None:
        G, J = [], []
        for t in self.t_j:
            g, j = pre.gamma_at(t)
            G.append(quat_to_matrix(g))
            J.append(j)
        self.G = np.array(G).reshape(-1, 3, 3)
        self.Jg = np.array(J).reshape(-1, 3, 3)

    def __len__(self) -> int:
        return len(self.t_j)

    def evaluate(self, pre: PreintegratedImu, xk: SystemState, xk1: SystemState, jac: bool):
        dbg = xk.bg - pre.bg_lin
        phi = self.Jg @ dbg
        dR = self.G @ exp_so3_batch(phi)
        Rrel = xk.R.T @ xk1.R
        a = Rrel @ self.m_k1
        e = a[None, :] - np.einsum("nij,nj->ni", dR, self.m_j)
        if not jac:
            return e, None
        J_k = skew(a)
        J_k1 = -Rrel @ skew(self.m_k1)
        J_bg = dR @ skew_batch(self.m_j) @ right_jacobian_batch(phi) @ self.Jg
        return e, (J_k, J_k1, J_bg)


@dataclass
class FactorGraphWindow:
    camera: CameraModel
    config: OptimizerConfig = field(default_factory=OptimizerConfig)
    imu_noise: ImuNoiseParams = field(default_factory=ImuNoiseParams)
    mag_noise: MagNoiseParams = field(default_factory=MagNoiseParams)
    sigma_px: float = 1.0
    g_W: np.ndarray = field(default_factory=lambda: GRAVITY.copy())
    use_mag: bool = True
    outlier_px: float = 10.0
    states: list = field(default_factory=list)        # Frame objects, oldest first
    imu_factors: list = field(default_factory=list)   # imu_factors[i] links states i, i+1
    mag_factors: list = field(default_factory=list)   # MagPairFactor or None, same indexing
    landmarks: dict = field(default_factory=dict)     # id -> Landmark
    prior: MarginalizationPrior = field(default_factory=MarginalizationPrior)
    finished: list = field(default_factory=list)      # finalized keyframes (t, SystemState)
    last_report: object = None

    # ------------------------------------------------------------ views
    def __len__(self) -> int:
        return len(self.states)

    @property
    def visual_factors(self) -> list:
        out = []
        for f in self.states:
            for lid, uv in zip(f.lm_ids, f.uv):
                lm = self.landmarks.get(int(lid))
                if lm is not None and lm.status == "active":
                    out.append(FeatureObservation(f.id, int(lid), uv, self.sigma_px))
        return out

    def index_of(self, frame_id: int) -> int:
        for i, f in enumerate(self.states):
            if f.id == frame_id:
                return i
        raise KeyError(frame_id)

    def newest_keyframe(self) -> Frame | None:
        for f in reversed(self.states):
            if f.keyframe:
                return f
        return None

    def check_invariants(self) -> None:
        assert len(self.imu_factors) == len(self.states) - 1
        assert len(self.mag_factors) == len(self.states) - 1
        for i, pre in enumerate(self.imu_factors):
            assert abs(pre.t0 - self.states[i].t) < 1e-6
            assert abs(pre.t1 - self.states[i + 1].t) < 1e-6
            mf = self.mag_factors[i]
            if mf is not None and len(mf):
                assert mf.t_j.min() > self.states[i].t - 1e-9
                assert mf.t_j.max() <= self.states[i + 1].t + 1e-9
        ids = {f.id for f in self.states}
        assert set(self.prior.state_ids) <= ids
        for ob in self.visual_factors:
            assert ob.frame_id in ids and ob.landmark_id in self.landmarks


def keyframe_policy(window: FactorGraphWindow, new_frame: Frame) -> bool:
    """Keyframe iff landmark overlap with the newest keyframe drops below the
    threshold or the predicted translation since it exceeds the limit."""
    kf = window.newest_keyframe()
    if kf is None:
        return True
    cfg = window.config
    if len(kf.lm_ids):
        overlap = np.isin(kf.lm_ids, new_frame.lm_ids).sum() / len(kf.lm_ids)
    else:
        overlap = 0.0 if len(new_frame.lm_ids) else 1.0
    moved = np.linalg.norm(new_frame.x.p - kf.x.p)
    return bool(overlap < cfg.keyframe_overlap or moved > cfg.keyframe_translation)


def add_frame(window: FactorGraphWindow, frame_id: int, t: float, state_guess: SystemState | None,
              imu_segment=None, mag_segment: MagSegment | None = None,
              lm_ids=(), uv=()) -> FactorGraphWindow:
    """Insert a frame: IMU/mag factors from the newest state, keyframe decision,
    and triangulation of newly trackable landmarks."""
    lm_ids = np.asarray(lm_ids, dtype=int).reshape(-1)
    uv = np.asarray(uv, dtype=float).reshape(-1, 2)
    if not window.states:
        if state_guess is None:
            raise ValueError("the first frame needs an initial state")
        x0 = SystemState(state_guess.p, state_guess.q, state_guess.v, state_guess.bg,
                         state_guess.ba, float(t))
        window.states.append(Frame(frame_id, float(t), x0, True, lm_ids, uv))
        return window
    last = window.states[-1]
    if not t > last.t:
        raise TimestampRegressionError(f"frame time {t} does not follow {last.t}")
    if imu_segment is None:
        raise ValueError("IMU samples are required between frames")
    it, gyro, accel = imu_segment
    if abs(it[0] - last.t) > 1e-6 or abs(it[-1] - t) > 1e-6:
        raise ValueError(f"IMU segment [{it[0]}, {it[-1]}] does not span frame interval "
                         f"[{last.t}, {t}]")
    pre = PreintegratedImu(last.x.bg, last.x.ba, window.imu_noise)
    pre.integrate_arrays(it, gyro, accel)
    pred = predict_state(pre, last.x, window.g_W)
    x = pred if state_guess is None else state_guess
    x = SystemState(x.p, x.q, x.v, x.bg, x.ba, float(t))
    mf = None
    if window.use_mag and mag_segment is not None and len(mag_segment.t):
        mf = MagPairFactor.build(mag_segment, pre)
    frame = Frame(frame_id, float(t), x, False, lm_ids, uv)
    frame.keyframe = keyframe_policy(window, frame)
    window.states.append(frame)
    window.imu_factors.append(pre)
    window.mag_factors.append(mf)
    _triangulate_new(window, frame)
    return window


def _triangulate_new(window: FactorGraphWindow, frame: Frame) -> None:
    cam = window.camera
    for lid in frame.lm_ids:
        lid = int(lid)
        if lid in window.landmarks:
            continue
        obs = []
        for f in window.states:
            r = f.index.get(lid)
            if r is not None:
                obs.append((FeatureObservation(f.id, lid, f.uv[r]), (f.x.R, f.x.p)))
        if len(obs) < 2:
            continue
        try:
            res = triangulate(obs, cam, max_reproj_px=max(5.0, 5.0 * window.sigma_px))
        except InsufficientBaselineError:
            continue
        if res.low_quality or res.parallax_deg < window.config.min_parallax_deg:
            continue
        window.landmarks[lid] = Landmark(lid, res.point, "active")


# ---------------------------------------------------------------- cost assembly

@dataclass
class _Values:
    states: list
    lms: np.ndarray    # (L, 3)


@dataclass
class _Obs:
    fi: np.ndarray
    li: np.ndarray
    uv: np.ndarray


class _BlockSystem:
    """Normal equations with landmarks kept as 3x3 blocks for the Schur solve."""

    def __init__(self, S: int, L: int):
        D = STATE_DIM * S
        self.S, self.L = S, L
        self.Hss = np.zeros((D, D))
        self.bs = np.zeros(D)
        self.Hsl = np.zeros((S, STATE_DIM, L, 3))
        self.Hll = np.zeros((L, 3, 3))
        self.bl = np.zeros((L, 3))
        self.cost = 0.0

    def add_states(self, idx, J, W, r):
        """Accumulate a dense residual block over several states."""
        JW = J.T @ W
        if all(b == a + 1 for a, b in zip(idx, idx[1:])):
            cols = slice(STATE_DIM * idx[0], STATE_DIM * (idx[-1] + 1))
            self.Hss[cols, cols] += JW @ J
        else:
            cols = np.concatenate([np.arange(STATE_DIM * i, STATE_DIM * (i + 1)) for i in idx])
            self.Hss[np.ix_(cols, cols)] += JW @ J
        self.bs[cols] += JW @ r

    def solve(self, lam: float) -> np.ndarray:
        D, L = len(self.bs), self.L
        if L == 0:
            return -damped_solve(self.Hss, self.bs, lam)
        Hll = self.Hll.copy()
        if lam > 0:
            d = np.clip(np.einsum("nii->ni", Hll), 1e-12, None)
            Hll[:, np.arange(3), np.arange(3)] += lam * d
        Hll_inv = np.linalg.inv(Hll)
        Hsl = self.Hsl.reshape(D, L, 3)
        T = np.einsum("dlk,lkm->dlm", Hsl, Hll_inv)
        Tf, Hf = T.reshape(D, 3 * L), Hsl.reshape(D, 3 * L)
        Sred = self.Hss - Tf @ Hf.T
        bred = self.bs - Tf @ self.bl.reshape(-1)
        dxs = -damped_solve(0.5 * (Sred + Sred.T), bred, lam)
        rhs = self.bl + np.einsum("dlk,d->lk", Hsl, dxs)
        dxl = -np.einsum("lkm,lm->lk", Hll_inv, rhs)
        return np.concatenate([dxs, dxl.reshape(-1)])

    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        D, L = len(self.bs), self.L
        n = D + 3 * L
        H = np.zeros((n, n))
        H[:D, :D] = self.Hss
        Hsl = self.Hsl.reshape(D, 3 * L)
        H[:D, D:] = Hsl
        H[D:, :D] = Hsl.T
        for l in range(L):
            H[D + 3 * l:D + 3 * l + 3, D + 3 * l:D + 3 * l + 3] = self.Hll[l]
        return H, np.concatenate([self.bs, self.bl.reshape(-1)])


class _WindowProblem:
    """Joint visual / inertial / magnetometer / prior cost of a window."""

    def __init__(self, window: FactorGraphWindow, lm_ids: list, obs: _Obs,
                 imu_idx=None, mag_idx=None, use_prior=True):
        self.w = window
        self.lm_ids = lm_ids
        self.obs = obs
        n = len(window.states) - 1
        self.imu_idx = list(range(n)) if imu_idx is None else list(imu_idx)
        self.mag_idx = list(range(n)) if mag_idx is None else list(mag_idx)
        self.use_prior = use_prior and window.prior.dim > 0
        self.refresh_information()
        ids = [f.id for f in window.states]
        self.prior_idx = [ids.index(i) for i in window.prior.state_ids] if self.use_prior else []
        self.mag_w = 1.0 / (2.0 * window.mag_noise.sigma_m**2)
        self.mag_correlated = window.config.mag_weighting == "correlated"
        self.huber_k = window.config.huber_threshold_px / window.sigma_px

    def refresh_information(self):
        w = self.w
        self.info = {i: residual_information(w.imu_factors[i], w.states[i].x) for i in self.imu_idx}

    def values(self) -> _Values:
        lms = np.array([self.w.landmarks[l].l_W for l in self.lm_ids]).reshape(-1, 3)
        return _Values([f.x for f in self.w.states], lms)

    def retract(self, v: _Values, dx: np.ndarray) -> _Values:
        S = len(v.states)
        states = [x.retract(dx[STATE_DIM * i:STATE_DIM * (i + 1)]) for i, x in enumerate(v.states)]
        return _Values(states, v.lms + dx[STATE_DIM * S:].reshape(-1, 3))

    def _visual(self, v: _Values, jac: bool):
        o = self.obs
        if len(o.fi) == 0:
            return 0.0, None
        R = np.array([v.states[i].R for i in range(len(v.states))])[o.fi]
        p = np.array([v.states[i].p for i in range(len(v.states))])[o.fi]
        uv, Jp, Jl, z = project_batch(self.w.camera, R, p, v.lms[o.li])
        r = (uv - o.uv) / self.w.sigma_px
        s = (r * r).sum(axis=1)
        sq = np.sqrt(s)
        k = self.huber_k
        inlier = sq <= k
        rho = np.where(inlier, s, 2.0 * k * sq - k * k)
        rho = np.where(z > 1e-3, rho, 1e12)   # behind the camera
        if not jac:
            return float(rho.sum()), None
        wgt = np.where(inlier, 1.0, k / np.maximum(sq, 1e-300)) / self.w.sigma_px**2
        wgt = np.where(z > 1e-3, wgt, 0.0)
        return float(rho.sum()), (uv - o.uv, Jp, Jl, wgt)

    def cost(self, v: _Values) -> float:
        return self._assemble(v, jac=False)

    def linearize(self, v: _Values) -> _BlockSystem:
        return self._assemble(v, jac=True)

    def _assemble(self, v: _Values, jac: bool):
        w = self.w
        sysm = _BlockSystem(len(v.states), len(v.lms)) if jac else None
        total = 0.0
        for i in self.imu_idx:
            pre = w.imu_factors[i]
            xk, xk1 = v.states[i], v.states[i + 1]
            if jac:
                r, Jk, Jk1 = linearize_inertial(pre, xk, xk1, w.g_W)
            else:
                r = inertial_residual(pre, xk, xk1, w.g_W)
            W = self.info[i]
            c = float(r @ W @ r)
            if not np.isfinite(c):
                raise NumericalFailure("non-finite inertial cost", f"imu[{w.states[i].id}]")
            total += c
            if jac:
                sysm.add_states([i, i + 1], np.hstack([Jk, Jk1]), W, r)
        for i in self.mag_idx:
            mf = w.mag_factors[i]
            if mf is None or len(mf) == 0:
                continue
            e, J = mf.evaluate(w.imu_factors[i], v.states[i], v.states[i + 1], jac)
            n = len(e)
            se = e.sum(axis=0)
            # shared-reference weighting: W = (I - 11^T / (n + 1)) / sigma^2 per axis,
            # which equals 1 / (2 sigma^2) for a single pair
            mb = 2.0 * self.mag_w / (n + 1) if self.mag_correlated else 0.0
            mw = 2.0 * self.mag_w if self.mag_correlated else self.mag_w
            c = float(mw * (e * e).sum() - mb * se @ se)
            if not np.isfinite(c):
                raise NumericalFailure("non-finite magnetometer cost", f"mag[{w.states[i].id}]")
            total += c
            if jac:
                J_k, J_k1, J_bg = J
                Jb = J_bg.reshape(3 * n, 3)
                sJb = J_bg.sum(axis=0)
                blocks = [(i, SQ), (i, SBG), (i + 1, SQ)]
                S = [n * J_k, sJb, n * J_k1]
                Hb = [[n * J_k.T @ J_k, J_k.T @ sJb, n * J_k.T @ J_k1],
                      [None, Jb.T @ Jb, sJb.T @ J_k1],
                      [None, None, n * J_k1.T @ J_k1]]
                gb = [J_k.T @ se, Jb.T @ e.reshape(-1), J_k1.T @ se]
                for r, (si, sr) in enumerate(blocks):
                    rows = slice(STATE_DIM * si + sr.start, STATE_DIM * si + sr.stop)
                    sysm.bs[rows] += mw * gb[r] - mb * S[r].T @ se
                    for c_, (sj, sc) in enumerate(blocks[r:], start=r):
                        cols = slice(STATE_DIM * sj + sc.start, STATE_DIM * sj + sc.stop)
                        Hrc = mw * Hb[r][c_] - mb * S[r].T @ S[c_]
                        sysm.Hss[rows, cols] += Hrc
                        if c_ != r:
                            sysm.Hss[cols, rows] += Hrc.T
        c, vis = self._visual(v, jac)
        if not np.isfinite(c):
            raise NumericalFailure("non-finite reprojection cost", "visual")
        total += c
        if jac and vis is not None:
            r, Jp, Jl, wgt = vis
            o = self.obs
            wJp = Jp * wgt[:, None, None]
            wJl = Jl * wgt[:, None, None]
            Hpp = np.einsum("nri,nrj->nij", wJp, Jp)
            bp = np.einsum("nri,nr->ni", wJp, r)
            for_frames = np.zeros((sysm.S, 6, 6))
            np.add.at(for_frames, o.fi, Hpp)
            bframes = np.zeros((sysm.S, 6))
            np.add.at(bframes, o.fi, bp)
            for i in range(sysm.S):
                a = STATE_DIM * i
                sysm.Hss[a:a + 6, a:a + 6] += for_frames[i]
                sysm.bs[a:a + 6] += bframes[i]
            sysm.Hsl[o.fi, :6, o.li, :] += np.einsum("nri,nrj->nij", wJp, Jl)
            np.add.at(sysm.Hll, o.li, np.einsum("nri,nrj->nij", wJl, Jl))
            np.add.at(sysm.bl, o.li, np.einsum("nri,nr->ni", wJl, r))
        if self.use_prior:
            pstates = [v.states[i] for i in self.prior_idx]
            e = w.prior.residual(pstates)
            c = float(e @ e)
            if not np.isfinite(c):
                raise NumericalFailure("non-finite prior cost", "prior")
            total += c
            if jac:
                sysm.add_states(self.prior_idx, w.prior.jacobian(pstates), np.eye(len(e)), e)
        if jac:
            sysm.cost = total
            return sysm
        return total


def _active_landmarks(window: FactorGraphWindow) -> list:
    if not window.states:
        return []
    all_ids = np.concatenate([f.lm_ids for f in window.states])
    ids, counts = np.unique(all_ids, return_counts=True)
    out = []
    for lid, c in zip(ids, counts):
        lm = window.landmarks.get(int(lid))
        if lm is not None and lm.status == "active" and c >= 2:
            out.append(int(lid))
    return out


def _observations(window: FactorGraphWindow, lm_ids: list, frames_mask=None) -> _Obs:
    pos = {l: k for k, l in enumerate(lm_ids)}
    fi, li, uv = [], [], []
    for i, f in enumerate(window.states):
        if frames_mask is not None and not frames_mask[i]:
            continue
        for r, lid in enumerate(f.lm_ids):
            k = pos.get(int(lid))
            if k is not None:
                fi.append(i)
                li.append(k)
                uv.append(f.uv[r])
    return _Obs(np.array(fi, dtype=int), np.array(li, dtype=int), np.array(uv).reshape(-1, 2))


def _cull_behind(window: FactorGraphWindow, lm_ids: list) -> list:
    """Drop landmarks that sit behind (or on) any observing camera."""
    obs = _observations(window, lm_ids)
    if len(obs.fi) == 0:
        return lm_ids
    R = np.array([f.x.R for f in window.states])[obs.fi]
    p = np.array([f.x.p for f in window.states])[obs.fi]
    lms = np.array([window.landmarks[l].l_W for l in lm_ids])
    _, _, _, z = project_batch(window.camera, R, p, lms[obs.li])
    bad = set(np.asarray(lm_ids)[obs.li[z <= 0.05]].tolist())
    for l in bad:
        window.landmarks[l].status = "dropped"
    return [l for l in lm_ids if l not in bad]


def optimize(window: FactorGraphWindow, config: OptimizerConfig | None = None) -> FactorGraphWindow:
    """Robustified LM over all states and active landmarks of the window."""
    cfg = config or window.config
    if len(window.states) < 2:
        raise ValueError("optimize needs at least two states")
    lm_ids = _cull_behind(window, _active_landmarks(window))
    prob = _WindowProblem(window, lm_ids, _observations(window, lm_ids))
    thr_g, thr_a = cfg.repropagation_thresholds

    def repropagate(v: _Values) -> bool:
        changed = False
        for i, pre in enumerate(window.imu_factors):
            x = v.states[i]
            if (np.linalg.norm(x.bg - pre.bg_lin) > thr_g
                    or np.linalg.norm(x.ba - pre.ba_lin) > thr_a):
                pre.repropagate(x.bg, x.ba)
                if window.mag_factors[i] is not None:
                    window.mag_factors[i].refresh(pre)
                changed = True
        if changed:
            prob.refresh_information()
        return changed

    values, rep = levenberg_marquardt(prob, prob.values(), cfg, before_iteration=repropagate)
    for f, x in zip(window.states, values.states):
        f.x = x
    for l, p in zip(lm_ids, values.lms):
        window.landmarks[l].l_W = p
    window.last_report = rep
    _reject_outliers(window, lm_ids, values)
    return window


def _reject_outliers(window: FactorGraphWindow, lm_ids: list, values: _Values) -> None:
    obs = _observations(window, lm_ids)
    if len(obs.fi) == 0:
        return
    R = np.array([x.R for x in values.states])[obs.fi]
    p = np.array([x.p for x in values.states])[obs.fi]
    uv, _, _, z = project_batch(window.camera, R, p, values.lms[obs.li])
    err = np.linalg.norm(uv - obs.uv, axis=1)
    bad = (err > window.outlier_px) | (z <= 0.05)
    for k in np.unique(obs.li[bad]):
        window.landmarks[lm_ids[k]].status = "dropped"


# ---------------------------------------------------------------- marginalization

def marginalize(window: FactorGraphWindow, config: OptimizerConfig | None = None) -> FactorGraphWindow:
    """Shrink the window to at most M_kf keyframes plus M_recent recent frames.

    (a) a non-keyframe leaving the recent set is removed by merging its two
        IMU intervals (and magnetometer sets) into one; its visual
        measurements are dropped.
    (b) once there are more than M_kf older keyframes, the oldest keyframe is
        marginalized together with the landmarks it sees that the newest
        keyframe does not; the absorbed factors become the new prior.
    """
    cfg = config or window.config
    while True:
        n = len(window.states)
        recent_start = max(n - cfg.M_recent, 0)
        old = [i for i in range(1, recent_start) if not window.states[i].keyframe]
        if old:
            _merge_out(window, old[0])
            continue
        kfs = [i for i in range(recent_start) if window.states[i].keyframe]
        if len(kfs) > cfg.M_kf:
            _marginalize_oldest_keyframe(window)
            continue
        break
    return window


def _merge_out(window: FactorGraphWindow, i: int) -> None:
    f = window.states[i]
    if f.id in window.prior.state_ids:
        raise RuntimeError("prior references a non-keyframe; window bookkeeping is corrupt")
    a, b = window.imu_factors[i - 1], window.imu_factors[i]
    xk = window.states[i - 1].x
    merged = PreintegratedImu(xk.bg, xk.ba, window.imu_noise)
    merged.integrate_arrays(np.concatenate([a.sample_t, b.sample_t[1:]]),
                            np.concatenate([a.sample_gyro, b.sample_gyro[1:]]),
                            np.concatenate([a.sample_accel, b.sample_accel[1:]]))
    ma, mb = window.mag_factors[i - 1], window.mag_factors[i]
    mf = None
    if mb is not None:
        parts = [m for m in (ma, mb) if m is not None]
        mf = MagPairFactor(np.concatenate([m.t_j for m in parts]),
                           np.concatenate([m.m_j for m in parts]), mb.m_k1)
        mf.refresh(merged)
    window.imu_factors[i - 1:i + 1] = [merged]
    window.mag_factors[i - 1:i + 1] = [mf]
    del window.states[i]


def _marginalize_oldest_keyframe(window: FactorGraphWindow) -> None:
    f0 = window.states[0]
    newest = window.newest_keyframe()
    marg_lms = sorted(int(l) for l in f0.lm_ids
                      if int(l) in window.landmarks and window.landmarks[int(l)].status == "active"
                      and int(l) not in newest.index)
    kf_mask = [f.keyframe for f in window.states]
    obs = _observations(window, marg_lms, kf_mask)
    prob = _WindowProblem(window, marg_lms, obs, imu_idx=[0], mag_idx=[0])
    sysm = prob.linearize(prob.values())
    H, b = sysm.dense()
    S = len(window.states)
    D = STATE_DIM * S
    involved = [i for i in range(S)
                if np.any(H[STATE_DIM * i:STATE_DIM * (i + 1)] != 0.0)]
    if 0 not in involved:
        involved = [0] + involved
    var_cols = np.concatenate([np.arange(STATE_DIM * i, STATE_DIM * (i + 1)) for i in involved]
                              + [np.arange(D, D + 3 * len(marg_lms))])
    Hs, bs = H[np.ix_(var_cols, var_cols)], b[var_cols]
    marg_local = list(range(STATE_DIM)) + list(range(STATE_DIM * len(involved), len(var_cols)))
    Hk, bk, _ = schur_complement(Hs, bs, marg_local)
    kept = involved[1:]
    J0, r0 = prior_from_information(Hk, bk)
    window.prior = MarginalizationPrior(J0, r0, [window.states[i].x for i in kept],
                                        [window.states[i].id for i in kept])
    window.finished.append((f0.t, f0.x))
    del window.states[0]
    del window.imu_factors[0]
    del window.mag_factors[0]
    for l in marg_lms:
        window.landmarks[l].status = "marginalized"
    if marg_lms:
        for f in window.states:
            f.drop_landmarks(marg_lms)
    seen = set(np.concatenate([f.lm_ids for f in window.states]).tolist()) if window.states else set()
    for l in [l for l in window.landmarks if l not in seen]:
        del window.landmarks[l]
