"""Comparison methods: online primal-dual and primal averaging.

Primal-dual keeps one policy and alternates a policy-gradient step on the
Lagrangian (estimated from the epoch's own rollout) with the same projected
dual step A-CRL uses.  Primal averaging executes the running mean of the
maximizers visited by a multiplier trace.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dual import DualTrace, EpochRecord, SlacknessMonitor, dual_step
from .envs import ContinuousMonitoringEnv, TabularCmdp
from .executor import ExecReport, StepTrace
from .policy import TIE_TOL, RbfPolicy, TabularPolicy
from .rng import substream
from .trainer import DivergenceError

try:
    import numba as _numba
except ImportError:  # pragma: no cover
    _numba = None


@dataclass
class PrimalDualConfig:
    eta_theta: float = 0.025
    eta_lambda: float = 0.0025
    T0: int = 10
    epochs: int = 40_000
    seed: int = 0
    lambda0: Sequence[float] | None = None
    probe_state: int | None = None
    record_epochs: bool = False
    record_steps: bool = False
    max_theta_norm: float = 1e6
    occupancy_bins: int = 20

    def __post_init__(self):
        # eta_lambda = 0 is allowed: it degenerates to plain policy gradient on r_0
        if self.eta_theta < 0 or self.eta_lambda < 0:
            raise ValueError("step sizes must be nonnegative")
        if self.T0 < 1:
            raise ValueError("T0 must be at least 1")
        if self.epochs < 1:
            raise ValueError("need at least one epoch")


class SoftmaxTabularPolicy:
    """Per-state softmax over admissible actions, ``pi(a|s) ~ exp(theta[s, a])``.

    Ignores the multiplier; primal-dual changes it through ``theta`` instead.
    """

    def __init__(self, mdp: TabularCmdp, theta: np.ndarray | None = None):
        self.mask = mdp.admissible_mask()
        self.theta = np.zeros(self.mask.shape) if theta is None else np.array(theta, dtype=float)
        if self.theta.shape != self.mask.shape:
            raise ValueError(f"theta must have shape {self.mask.shape}")

    def probs(self) -> np.ndarray:
        return _softmax_rows(self.theta, self.mask)

    def table(self, lam=None) -> np.ndarray:
        return self.probs()

    def distribution(self, state: int, lam=None) -> np.ndarray:
        return self.probs()[state]

    def to_tabular(self) -> TabularPolicy:
        return TabularPolicy(self.probs())


def _softmax_rows(theta: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = np.where(mask, theta, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(z), 0.0)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class PrimalDualReport:
    execution: ExecReport
    theta: np.ndarray
    probe: np.ndarray | None = None  # (K, A) probe-state action law used in each epoch (tabular)


def _pd_tabular_loop(theta, mask, next_cdf, rewards, c, eta_theta, eta_lambda, lam0, s0, u_act, u_next, max_norm):
    """Tabular primal-dual with REINFORCE on each epoch's rollout.

    ``u_act`` and ``u_next`` are ``(K, T0)`` uniforms for action and
    transition sampling.  Returns traces plus the epoch index at which the
    divergence guard fired (-1 if never).
    """
    K, T0 = u_act.shape
    S, A = mask.shape
    m = c.shape[0]
    lam = lam0.copy()
    lam_tr = np.zeros((K, m))
    gap_tr = np.zeros((K, m))
    act_tr = np.zeros((K, m), dtype=np.bool_)
    ep_sums = np.zeros((K, m + 1))
    probs_tr = np.zeros((K, S, A))
    states = np.zeros(K * T0, dtype=np.int64)
    actions = np.zeros(K * T0, dtype=np.int64)
    probs = np.zeros((S, A))
    grad = np.zeros((S, A))
    s = s0
    diverged = -1
    for k in range(K):
        for x in range(S):
            mx = -np.inf
            for a in range(A):
                if mask[x, a] and theta[x, a] > mx:
                    mx = theta[x, a]
            tot = 0.0
            for a in range(A):
                probs[x, a] = np.exp(theta[x, a] - mx) if mask[x, a] else 0.0
                tot += probs[x, a]
            for a in range(A):
                probs[x, a] /= tot
        probs_tr[k] = probs
        grad[:, :] = 0.0
        G = 0.0
        for t in range(T0):
            u = u_act[k, t]
            acc = 0.0
            a_sel = -1
            for a in range(A):
                if probs[s, a] > 0.0:
                    a_sel = a
                    acc += probs[s, a]
                    if u < acc:
                        break
            a = a_sel
            states[k * T0 + t] = s
            actions[k * T0 + t] = a
            r_lam = rewards[0, s, a]
            for i in range(m):
                ri = rewards[i + 1, s, a]
                ep_sums[k, i + 1] += ri
                r_lam += lam[i] * (ri - c[i])
            ep_sums[k, 0] += rewards[0, s, a]
            G += r_lam
            for b in range(A):
                grad[s, b] -= probs[s, b]
            grad[s, a] += 1.0
            v = u_next[k, t]
            nxt = S - 1
            for y in range(S):
                if v < next_cdf[s, a, y]:
                    nxt = y
                    break
            s = nxt
        norm = 0.0
        for x in range(S):
            for a in range(A):
                if mask[x, a]:
                    theta[x, a] += eta_theta * (G / T0) * grad[x, a]
                    norm += theta[x, a] * theta[x, a]
        lam_tr[k] = lam
        for i in range(m):
            g = ep_sums[k, i + 1] / T0 - c[i]
            gap_tr[k, i] = g
            raw = lam[i] - eta_lambda * g
            act_tr[k, i] = raw < 0.0
            lam[i] = raw if raw > 0.0 else 0.0
        if not np.isfinite(norm) or np.sqrt(norm) > max_norm:
            diverged = k
            break
    return lam, lam_tr, gap_tr, act_tr, ep_sums, probs_tr, states, actions, diverged


_pd_tabular_kernel = _numba.njit(cache=True)(_pd_tabular_loop) if _numba is not None else _pd_tabular_loop


def run_primal_dual(env, policy, cfg: PrimalDualConfig) -> PrimalDualReport:
    """Online primal-dual; ``policy`` is a :class:`SoftmaxTabularPolicy` or an :class:`RbfPolicy`.

    The policy's parameters are updated in place.
    """
    if isinstance(env, TabularCmdp):
        if not isinstance(policy, SoftmaxTabularPolicy):
            raise TypeError("tabular primal-dual needs a SoftmaxTabularPolicy")
        return _primal_dual_tabular(env, policy, cfg)
    if isinstance(env, ContinuousMonitoringEnv):
        if not isinstance(policy, RbfPolicy):
            raise TypeError("continuous primal-dual needs an RbfPolicy")
        return _primal_dual_continuous(env, policy, cfg)
    raise TypeError(f"unsupported environment {type(env).__name__}")


def _initial_lambda(cfg, m: int) -> np.ndarray:
    lam = np.zeros(m) if cfg.lambda0 is None else np.asarray(cfg.lambda0, dtype=float).copy()
    if lam.shape != (m,) or np.any(lam < 0):
        raise ValueError(f"lambda0 must be a nonnegative {m}-vector")
    return lam


def _primal_dual_tabular(mdp: TabularCmdp, policy: SoftmaxTabularPolicy, cfg: PrimalDualConfig) -> PrimalDualReport:
    rng = substream(cfg.seed, "primal-dual")
    K, T0, m = cfg.epochs, cfg.T0, mdp.n_constraints
    u_act = rng.random((K, T0))
    u_next = rng.random((K, T0))
    theta = np.ascontiguousarray(policy.theta, dtype=float)
    out = _pd_tabular_kernel(
        theta, policy.mask, np.cumsum(mdp.transition, axis=2), mdp.rewards, mdp.thresholds,
        float(cfg.eta_theta), float(cfg.eta_lambda), _initial_lambda(cfg, m), int(mdp.initial),
        u_act, u_next, float(cfg.max_theta_norm),
    )
    lam, lam_tr, gap_tr, act_tr, ep_sums, probs_tr, states, actions, diverged = out
    if diverged >= 0:
        raise DivergenceError(f"theta norm exceeded {cfg.max_theta_norm:.1e} at epoch {diverged}")
    policy.theta = theta

    trace = DualTrace(lam_tr, gap_tr, act_tr)
    monitor = SlacknessMonitor()
    for k in range(K):
        monitor.record(lam_tr[k], gap_tr[k])
    path = np.cumsum(ep_sums, axis=0) / (T0 * np.arange(1, K + 1))[:, None]
    visits = np.bincount(states, minlength=mdp.n_states).astype(float)
    step_r = mdp.rewards[:, states, actions].T
    records = []
    if cfg.record_epochs:
        for k in range(K):
            sl = slice(k * T0, (k + 1) * T0)
            records.append(
                EpochRecord(k, lam_tr[k].copy(), step_r[sl], mdp.thresholds, states[sl].tolist(),
                            actions[sl].tolist(), act_tr[k].copy())
            )
    steps = StepTrace(states, actions, step_r, np.repeat(np.arange(K), T0)) if cfg.record_steps else None
    execution = ExecReport(
        thresholds=mdp.thresholds.copy(),
        eta_lambda=cfg.eta_lambda,
        T0=T0,
        dual=trace,
        final_lambda=lam,
        average_path=path,
        occupancy=visits / visits.sum(),
        occupancy_edges=None,
        slackness=monitor.average(),
        epochs=records,
        steps=steps,
        probe=probs_tr[:, cfg.probe_state] if cfg.probe_state is not None else None,
    )
    return PrimalDualReport(execution, theta.copy(), execution.probe)


def _primal_dual_continuous(env: ContinuousMonitoringEnv, policy: RbfPolicy, cfg: PrimalDualConfig) -> PrimalDualReport:
    rng_start = substream(cfg.seed, "primal-dual-start")
    rng = substream(cfg.seed, "primal-dual")
    K, T0, m = cfg.epochs, cfg.T0, env.n_constraints
    c = env.thresholds
    lam = _initial_lambda(cfg, m)
    s = env.initial_state(rng_start)
    trace = DualTrace.empty(K, m)
    monitor = SlacknessMonitor()
    path = np.zeros((K, m + 1))
    totals = np.zeros(m + 1)
    positions = np.zeros((K * T0, 2))
    sigma = policy.sigma
    t = 0
    for k in range(K):
        fl = policy.lambda_features(lam)
        noise = rng.standard_normal((T0, 2))
        ep_r = np.zeros((T0, m + 1))
        score = np.zeros((policy.n_spatial, 2))
        for j in range(T0):
            fs = policy.spatial_features(s)
            a = policy.mean_from_features(fs, fl) + sigma * noise[j]
            s, r = env.step_batch(s[None], a[None])
            s, r = s[0], r[0]
            score += fs[:, None] * (noise[j] / sigma)[None, :]
            ep_r[j] = r
            positions[t] = s
            t += 1
        G = float(np.sum(ep_r[:, 0] + (ep_r[:, 1:] - c) @ lam))
        grad = (score[:, None, :] * fl[None, :, None]).reshape(-1, 2)
        policy.theta += cfg.eta_theta * (G / T0) * grad
        norm = float(np.linalg.norm(policy.theta))
        if not np.isfinite(norm) or norm > cfg.max_theta_norm:
            raise DivergenceError(f"theta norm {norm:.3e} exceeded {cfg.max_theta_norm:.1e} at epoch {k}")
        ep_sum = ep_r.sum(axis=0)
        gap = ep_sum[1:] / T0 - c
        new_lam, active = dual_step(lam, gap, cfg.eta_lambda)
        trace.lam[k], trace.gap[k], trace.active[k] = lam, gap, active
        monitor.record(lam, gap)
        totals += ep_sum
        path[k] = totals / ((k + 1) * T0)
        lam = new_lam
    H, xe, ye = np.histogram2d(
        positions[:, 0], positions[:, 1], bins=cfg.occupancy_bins,
        range=[[env.low[0], env.high[0]], [env.low[1], env.high[1]]],
    )
    execution = ExecReport(
        thresholds=c.copy(), eta_lambda=cfg.eta_lambda, T0=T0, dual=trace, final_lambda=lam,
        average_path=path, occupancy=H / H.sum(), occupancy_edges=(xe, ye), slackness=monitor.average(),
    )
    return PrimalDualReport(execution, policy.theta.copy())


# ---------------------------------------------------------------- primal averaging


@dataclass
class AveragedTabularPolicy:
    """Running mean ``(1/K) sum_k pi(lambda_k)`` of per-state action laws."""

    probs: np.ndarray
    count: int = 0

    @classmethod
    def empty(cls, n_states: int, n_actions: int) -> "AveragedTabularPolicy":
        return cls(np.zeros((n_states, n_actions)), 0)

    def to_tabular(self) -> TabularPolicy:
        if self.count < 1:
            raise ValueError("no policy has been averaged yet")
        p = self.probs / self.probs.sum(axis=1, keepdims=True)
        return TabularPolicy(p)

    def table(self, lam=None) -> np.ndarray:
        return self.to_tabular().probs


def primal_average_update(avg: AveragedTabularPolicy, pi_k) -> AveragedTabularPolicy:
    """Fold one more policy into the running mean (returns a new object)."""
    probs = pi_k.probs if isinstance(pi_k, TabularPolicy) else np.asarray(pi_k, dtype=float)
    if probs.shape != avg.probs.shape:
        raise ValueError(f"policy shape {probs.shape} does not match average {avg.probs.shape}")
    n = avg.count + 1
    return AveragedTabularPolicy(avg.probs + (probs - avg.probs) / n, n)


def average_policy_from_trace(policy, lams) -> AveragedTabularPolicy:
    """Average of ``policy.table(lambda_k)`` over a multiplier trace."""
    lams = np.atleast_2d(np.asarray(lams, dtype=float))
    first = policy.table(lams[0])
    total = np.zeros_like(first, dtype=float)
    for lam in lams:
        total += policy.table(lam)
    return AveragedTabularPolicy(total / len(lams), len(lams))


# ---------------------------------------------------------------- switch timing


def crossing_epochs(lam: np.ndarray, component: int = 0, level: float = 1.0, tol: float = TIE_TOL) -> np.ndarray:
    """Epochs where ``lam[component]`` moves above ``max(level, other components)``.

    This is the multiplier region in which staying at region ``component``
    becomes the maximizer; ``lam_1 > 1`` alone is not enough when
    ``lam_2 > lam_1``.  Values within ``tol`` of the boundary count as on it,
    the same tolerance the solver uses for ties (dual iterates hit the
    boundary exactly up to rounding).
    """
    lam = np.atleast_2d(lam)
    others = np.delete(lam, component, axis=1)
    top = np.maximum(level, others.max(axis=1)) if others.shape[1] else np.full(lam.shape[0], level)
    above = lam[:, component] > top + tol
    prev = np.concatenate([[False], above[:-1]])
    return np.flatnonzero(above & ~prev)


@dataclass
class SwitchTiming:
    k_lambda_cross: int | None
    k_policy_switch: int | None

    @property
    def observed(self) -> bool:
        return self.k_lambda_cross is not None and self.k_policy_switch is not None

    @property
    def delay(self) -> int | None:
        return self.k_policy_switch - self.k_lambda_cross if self.observed else None


def switch_timing(report: ExecReport, stay_action: int, component: int = 0, level: float = 1.0) -> SwitchTiming:
    """First multiplier crossing and first later epoch where the probe's stay-probability exceeds 1/2."""
    if report.probe is None:
        raise ValueError("report carries no probe trace")
    cross = crossing_epochs(report.dual.lam, component, level)
    if cross.size == 0:
        return SwitchTiming(None, None)
    k0 = int(cross[0])
    stay = report.probe[k0:, stay_action] > 0.5
    hits = np.flatnonzero(stay)
    return SwitchTiming(k0, k0 + int(hits[0]) if hits.size else None)


@dataclass
class SwitchComparison:
    acrl: SwitchTiming
    primal_dual: SwitchTiming
    peak_acrl: float
    peak_primal_dual: float
    extra: dict = field(default_factory=dict)


def switch_delay_compare(acrl: ExecReport, primal_dual: ExecReport, stay_action: int, component: int = 0) -> SwitchComparison:
    """Switch timing for both methods plus their peak multiplier on ``component``."""
    return SwitchComparison(
        acrl=switch_timing(acrl, stay_action, component),
        primal_dual=switch_timing(primal_dual, stay_action, component),
        peak_acrl=float(acrl.dual.lam[:, component].max()),
        peak_primal_dual=float(primal_dual.dual.lam[:, component].max()),
    )
