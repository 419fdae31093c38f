"""Online execution: a fixed ``pi(s, lambda)`` driven by the dual dynamics.

Each epoch runs ``T0`` steps with the multiplier frozen, then applies the
projected dual step.  The environment state carries over between epochs; the
run is one continuing trajectory.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dual import DualTrace, EpochRecord, SlacknessMonitor, dual_step
from .envs import ContinuousMonitoringEnv, TabularCmdp
from .rng import substream


@dataclass
class ExecConfig:
    eta_lambda: float = 0.5
    T0: int = 10
    epochs: int = 1000
    seed: int = 0
    lambda0: Sequence[float] | None = None
    record_epochs: bool = False
    record_steps: bool = False
    occupancy_bins: int = 20

    def __post_init__(self):
        if not self.eta_lambda > 0:
            raise ValueError("eta_lambda must be positive")
        if self.T0 < 1:
            raise ValueError("T0 must be at least 1")
        if self.epochs < 1:
            raise ValueError("need at least one epoch")


@dataclass
class StepTrace:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray  # (T, m+1)
    epoch: np.ndarray


@dataclass
class ExecReport:
    thresholds: np.ndarray
    eta_lambda: float
    T0: int
    dual: DualTrace
    final_lambda: np.ndarray
    average_path: np.ndarray  # (K, m+1) running averages at the end of each epoch
    occupancy: np.ndarray
    occupancy_edges: tuple | None
    slackness: float
    epochs: list[EpochRecord] = field(default_factory=list)
    steps: StepTrace | None = None
    probe: np.ndarray | None = None  # (K, A) probe-state action law per epoch, if requested

    @property
    def running_average(self) -> np.ndarray:
        return self.average_path[-1]

    @property
    def margins(self) -> np.ndarray:
        return self.running_average[1:] - self.thresholds

    @property
    def total_steps(self) -> int:
        return self.dual.K * self.T0

    def summary(self) -> dict:
        return {
            "steps": self.total_steps,
            "average_r0": float(self.running_average[0]),
            **{f"average_r{i + 1}": float(v) for i, v in enumerate(self.running_average[1:])},
            **{f"margin_{i + 1}": float(v) for i, v in enumerate(self.margins)},
            "min_margin": float(self.margins.min()),
            "slackness_average": self.slackness,
            "max_lambda_l1": float(self.dual.lam.sum(axis=1).max()),
        }

    def step_csv_rows(self):
        if self.steps is None:
            raise ValueError("run was executed without record_steps")
        m = self.thresholds.size
        st = self.steps
        header = ["t", "state", "action"] + [f"r_{i}" for i in range(m + 1)] + ["epoch"] + [
            f"lambda_{i + 1}" for i in range(m)
        ] + [f"running_avg_{i}" for i in range(m + 1)]
        yield header
        cum = np.cumsum(st.rewards, axis=0) / np.arange(1, len(st.rewards) + 1)[:, None]
        for t in range(len(st.rewards)):
            k = int(st.epoch[t])
            state = st.states[t]
            action = st.actions[t]
            state = ";".join(repr(float(x)) for x in state) if np.ndim(state) else int(state)
            action = ";".join(repr(float(x)) for x in action) if np.ndim(action) else int(action)
            yield [t, state, action, *st.rewards[t], k, *self.dual.lam[k], *cum[t]]


def _initial_lambda(cfg: ExecConfig, m: int) -> np.ndarray:
    lam = np.zeros(m) if cfg.lambda0 is None else np.asarray(cfg.lambda0, dtype=float).copy()
    if lam.shape != (m,) or np.any(lam < 0):
        raise ValueError(f"lambda0 must be a nonnegative {m}-vector")
    return lam


def execute_acrl(env, policy, cfg: ExecConfig, *, probe_state: int | None = None, start_state=None) -> ExecReport:
    """Run the execution phase for ``cfg.epochs`` epochs of ``cfg.T0`` steps."""
    if isinstance(env, TabularCmdp):
        return _execute_tabular(env, policy, cfg, probe_state, start_state)
    if isinstance(env, ContinuousMonitoringEnv):
        return _execute_continuous(env, policy, cfg, start_state)
    raise TypeError(f"unsupported environment {type(env).__name__}")


def _execute_tabular(mdp: TabularCmdp, policy, cfg: ExecConfig, probe_state, start_state) -> ExecReport:
    rng = substream(cfg.seed, "executor")
    m = mdp.n_constraints
    c = mdp.thresholds
    S, A = mdp.n_states, mdp.n_actions
    K, T0 = cfg.epochs, cfg.T0
    lam = _initial_lambda(cfg, m)
    det_next = mdp.transition.argmax(axis=2).tolist()
    deterministic = bool(np.all(mdp.transition.max(axis=2)[mdp.admissible_mask()] == 1.0))
    next_cdf = np.cumsum(mdp.transition, axis=2)
    rewards = mdp.rewards  # (m+1, S, A)

    trace = DualTrace.empty(K, m)
    monitor = SlacknessMonitor()
    path = np.zeros((K, m + 1))
    totals = np.zeros(m + 1)
    visits = np.zeros(S)
    probe = np.zeros((K, A)) if probe_state is not None else None
    records: list[EpochRecord] = []
    step_states, step_actions, step_rewards = [], [], []

    keep = cfg.record_epochs or cfg.record_steps
    samplers: dict[int, tuple] = {}  # per table object: (table, row CDFs, last supported action)
    s = mdp.initial if start_state is None else int(start_state)
    for k in range(K):
        table = policy.table(lam)
        if probe is not None:
            probe[k] = table[probe_state]
        cached = samplers.get(id(table))
        if cached is None or cached[0] is not table:
            cached = (table, np.cumsum(table, axis=1).tolist(), [int(np.flatnonzero(row)[-1]) for row in table])
            samplers[id(table)] = cached
        _, cdf, last = cached
        us = rng.random(T0).tolist()
        vs = rng.random(T0).tolist() if not deterministic else None
        counts = [0] * (S * A)
        ep_states, ep_actions = [], []
        for t in range(T0):
            a = bisect_right(cdf[s], us[t])
            if a >= A:
                a = last[s]
            counts[s * A + a] += 1
            if keep:
                ep_states.append(s)
                ep_actions.append(a)
            if deterministic:
                s = det_next[s][a]
            else:
                s = min(int(np.searchsorted(next_cdf[s, a], vs[t], side="right")), S - 1)
        counts = np.array(counts, dtype=float).reshape(S, A)
        ep_rewards_sum = np.einsum("sa,isa->i", counts, rewards)
        visits += counts.sum(axis=1)
        gap = ep_rewards_sum[1:] / T0 - c
        new_lam, active = dual_step(lam, gap, cfg.eta_lambda)
        trace.lam[k], trace.gap[k], trace.active[k] = lam, gap, active
        monitor.record(lam, gap)
        totals += ep_rewards_sum
        path[k] = totals / ((k + 1) * T0)
        if keep:
            ep_r = rewards[:, ep_states, ep_actions].T
            if cfg.record_epochs:
                records.append(EpochRecord(k, lam.copy(), ep_r, c, ep_states, ep_actions, active))
            if cfg.record_steps:
                step_states += ep_states
                step_actions += ep_actions
                step_rewards.append(ep_r)
        lam = new_lam

    steps = None
    if cfg.record_steps:
        steps = StepTrace(
            np.array(step_states), np.array(step_actions), np.vstack(step_rewards), np.repeat(np.arange(K), T0)
        )
    return ExecReport(
        thresholds=c.copy(),
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
        probe=probe,
    )


def _execute_continuous(env: ContinuousMonitoringEnv, policy, cfg: ExecConfig, start_state) -> ExecReport:
    rng_start = substream(cfg.seed, "executor-start")
    rng = substream(cfg.seed, "executor")
    m = env.n_constraints
    c = env.thresholds
    K, T0 = cfg.epochs, cfg.T0
    lam = _initial_lambda(cfg, m)
    s = env.initial_state(rng_start) if start_state is None else np.asarray(start_state, dtype=float)

    trace = DualTrace.empty(K, m)
    monitor = SlacknessMonitor()
    path = np.zeros((K, m + 1))
    totals = np.zeros(m + 1)
    positions = np.zeros((K * T0, 2))
    all_actions = np.zeros((K * T0, 2)) if cfg.record_steps else None
    all_rewards = np.zeros((K * T0, m + 1)) if cfg.record_steps else None
    records: list[EpochRecord] = []
    noise = rng.standard_normal((K * T0, 2))

    t = 0
    for k in range(K):
        fl = policy.lambda_features(lam)
        ep_r = np.zeros((T0, m + 1))
        ep_s, ep_a = [], []
        for j in range(T0):
            fs = policy.spatial_features(s)
            a = policy.mean_from_features(fs, fl) + policy.sigma * noise[t]
            s_next = env.move_batch(s[None], a[None])[0]
            r = env.rewards_batch(s_next[None])[0]
            if cfg.record_epochs:
                ep_s.append(s.copy())
                ep_a.append(a)
            if cfg.record_steps:
                all_actions[t] = a
                all_rewards[t] = r
            ep_r[j] = r
            s = s_next
            positions[t] = s
            t += 1
        ep_sum = ep_r.sum(axis=0)
        gap = ep_sum[1:] / T0 - c
        new_lam, active = dual_step(lam, gap, cfg.eta_lambda)
        trace.lam[k], trace.gap[k], trace.active[k] = lam, gap, active
        monitor.record(lam, gap)
        totals += ep_sum
        path[k] = totals / ((k + 1) * T0)
        if cfg.record_epochs:
            records.append(EpochRecord(k, lam.copy(), ep_r, c, ep_s, ep_a, active))
        lam = new_lam

    bins = cfg.occupancy_bins
    H, xe, ye = np.histogram2d(
        positions[:, 0], positions[:, 1], bins=bins, range=[[env.low[0], env.high[0]], [env.low[1], env.high[1]]]
    )
    steps = None
    if cfg.record_steps:
        steps = StepTrace(positions, all_actions, all_rewards, np.repeat(np.arange(K), T0))
    return ExecReport(
        thresholds=c.copy(),
        eta_lambda=cfg.eta_lambda,
        T0=T0,
        dual=trace,
        final_lambda=lam,
        average_path=path,
        occupancy=H / H.sum(),
        occupancy_edges=(xe, ye),
        slackness=monitor.average(),
        epochs=records,
        steps=steps,
    )


def occupancy_histogram(report: ExecReport) -> np.ndarray:
    """Normalised visit frequencies: per state (tabular) or a 2-D grid (continuous)."""
    return report.occupancy / report.occupancy.sum()


def policy_switch_trace(report: ExecReport, policy, probe_state: int) -> list[tuple[int, np.ndarray, np.ndarray]]:
    """Per epoch ``(k, lambda_k, action law at probe_state)`` for a tabular ``pi(s, lambda)``."""
    out = []
    for k in range(report.dual.K):
        lam = report.dual.lam[k]
        out.append((k, lam.copy(), np.array(policy.distribution(probe_state, lam), dtype=float)))
    return out


@dataclass
class T0SweepRow:
    T0: int
    epochs: int
    margins: np.ndarray
    average_r0: float
    slackness: float


def t0_bias_sweep(env, policy, base: ExecConfig, T0_values: Sequence[int], total_steps: int | None = None) -> list[T0SweepRow]:
    """Execute at several epoch lengths with a fixed total step budget."""
    values = [int(v) for v in T0_values]
    if len(set(values)) < 2:
        raise ValueError("need at least two distinct T0 values")
    budget = base.epochs * base.T0 if total_steps is None else int(total_steps)
    rows = []
    for T0 in values:
        epochs = max(1, budget // T0)
        cfg = ExecConfig(
            eta_lambda=base.eta_lambda, T0=T0, epochs=epochs, seed=base.seed, lambda0=base.lambda0,
            occupancy_bins=base.occupancy_bins,
        )
        rep = execute_acrl(env, policy, cfg)
        rows.append(T0SweepRow(T0, epochs, rep.margins, float(rep.running_average[0]), rep.slackness))
    return rows
