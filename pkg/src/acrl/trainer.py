"""Training phase: learn ``pi_theta(s, lambda)`` maximising the Lagrangian reward.

Continuous environments use REINFORCE on fixed-horizon rollouts whose
multiplier is sampled once per rollout and held constant.  Tabular
environments are "trained" exactly by solving the Lagrangian MDP on a grid of
multipliers.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .envs import ContinuousMonitoringEnv, TabularCmdp
from .policy import GridLookupPolicy, RbfPolicy, solve_lagrangian_batch
from .rng import substream

try:
    import numba as _numba
except ImportError:  # pragma: no cover
    _numba = None

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 50_000
    horizon: int = 20
    step_size: float = 0.001
    lambda_max: float = 5.0
    batch_size: int = 10
    baseline: str = "mean"  # "mean" | "none"
    seed: int = 0
    log_every: int = 500
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None
    max_theta_norm: float = 1e6
    compiled: bool = True

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.baseline not in ("mean", "none"):
            raise ValueError(f"unknown baseline mode {self.baseline!r}")
        if self.lambda_max < 0:
            raise ValueError("lambda_max must be nonnegative")


@dataclass
class TrainReport:
    theta: np.ndarray
    curve_iteration: list[int] = field(default_factory=list)
    curve_return: list[float] = field(default_factory=list)
    curve_theta_norm: list[float] = field(default_factory=list)
    wall_clock: float = 0.0

    def csv_rows(self):
        yield ["iteration", "mean_augmented_return", "theta_norm"]
        yield from zip(self.curve_iteration, self.curve_return, self.curve_theta_norm)


def sample_augmented_start(rng: np.random.Generator, env, lambda_max: float, n: int | None = None):
    """Draw ``(s, lambda)`` with ``s`` from the start distribution and ``lambda ~ U[0, lambda_max]^m``."""
    m = env.n_constraints
    if isinstance(env, TabularCmdp):
        s = env.initial if n is None else np.full(n, env.initial)
    elif n is None:
        s = env.initial_state(rng)
    else:
        s = env.initial_states(rng, n)
    shape = (m,) if n is None else (n, m)
    lam = rng.uniform(0.0, lambda_max, size=shape) if lambda_max > 0 else np.zeros(shape)
    return s, lam


def rollout_batch(env: ContinuousMonitoringEnv, policy: RbfPolicy, s: np.ndarray, lam: np.ndarray, noise: np.ndarray):
    """Roll ``len(noise)`` steps for a batch of starts with fixed multipliers.

    ``noise[t, b]`` is the standard normal draw of rollout ``b`` at step ``t``.
    Returns the augmented returns ``G[b]``, the multiplier features ``(B, Nl)``
    and the accumulated spatial score ``sum_t phi_s(s_t) (a_t - mean_t)/sigma^2``
    of shape ``(B, Ns, 2)``; the full score is its outer product with the
    multiplier features.
    """
    c = env.thresholds
    fl = policy.lambda_features(lam)
    B = s.shape[0]
    G = np.zeros(B)
    score = np.zeros((B, policy.n_spatial, 2))
    sigma = policy.sigma
    for z in noise:
        fs = policy.spatial_features(s)
        mu = policy.mean_from_features(fs, fl)
        s, r = env.step_batch(s, mu + sigma * z)
        score += fs[:, :, None] * (z / sigma)[:, None, :]
        G += r[:, 0] + np.sum(lam * (r[:, 1:] - c), axis=1)
    return G, fl, score


if _numba is not None:

    @_numba.njit(cache=True)
    def _rollout_kernel(theta3, sc, sbw, fl, lam, s0, noise, regions, low, high, max_step, c, sigma):
        T, B, _ = noise.shape
        Ns, Nl, _ = theta3.shape
        m = c.shape[0]
        G = np.zeros(B)
        score = np.zeros((B, Ns, 2))
        fs = np.empty(Ns)
        W = np.empty((Ns, 2))
        for b in range(B):
            for i in range(Ns):
                w0 = 0.0
                w1 = 0.0
                for j in range(Nl):
                    w0 += fl[b, j] * theta3[i, j, 0]
                    w1 += fl[b, j] * theta3[i, j, 1]
                W[i, 0] = w0
                W[i, 1] = w1
            x = s0[b, 0]
            y = s0[b, 1]
            for t in range(T):
                mu0 = 0.0
                mu1 = 0.0
                for i in range(Ns):
                    dx = (x - sc[i, 0]) / sbw[0]
                    dy = (y - sc[i, 1]) / sbw[1]
                    f = np.exp(-0.5 * (dx * dx + dy * dy))
                    fs[i] = f
                    mu0 += f * W[i, 0]
                    mu1 += f * W[i, 1]
                z0 = noise[t, b, 0]
                z1 = noise[t, b, 1]
                a0 = mu0 + sigma * z0
                a1 = mu1 + sigma * z1
                norm = np.sqrt(a0 * a0 + a1 * a1)
                scale = min(1.0, max_step / max(norm, 1e-300))
                x = min(max(x + a0 * scale, low[0]), high[0])
                y = min(max(y + a1 * scale, low[1]), high[1])
                for i in range(Ns):
                    score[b, i, 0] += fs[i] * (z0 / sigma)
                    score[b, i, 1] += fs[i] * (z1 / sigma)
                for k in range(m):
                    inside = regions[k, 0] <= x <= regions[k, 2] and regions[k, 1] <= y <= regions[k, 3]
                    G[b] += lam[b, k] * ((1.0 if inside else 0.0) - c[k])
        return G, score


def rollout_batch_fast(env: ContinuousMonitoringEnv, policy: RbfPolicy, s: np.ndarray, lam: np.ndarray, noise: np.ndarray):
    """Compiled equivalent of :func:`rollout_batch` (falls back to it without numba)."""
    if _numba is None:
        return rollout_batch(env, policy, s, lam, noise)
    fl = policy.lambda_features(lam)
    theta3 = np.ascontiguousarray(policy.theta.reshape(policy.n_spatial, policy.n_lambda, 2))
    G, score = _rollout_kernel(
        theta3, policy.spatial_centers, policy.spatial_bandwidth, fl, np.ascontiguousarray(lam, dtype=float),
        np.ascontiguousarray(s, dtype=float), np.ascontiguousarray(noise), env.regions, env.low, env.high,
        float(env.max_step), env.thresholds, policy.sigma,
    )
    return G, fl, score


def reinforce_gradient(G: np.ndarray, fl: np.ndarray, score: np.ndarray, baseline: str = "mean") -> np.ndarray:
    """Batch-mean REINFORCE estimate of the gradient of ``E[G]`` w.r.t. ``theta`` (shape ``(Ns*Nl, 2)``)."""
    adv = G - G.mean() if baseline == "mean" else G
    g = np.einsum("b,bj,bid->ijd", adv, fl, score) / G.shape[0]
    return g.reshape(-1, 2)


def train_acrl(env: ContinuousMonitoringEnv, policy: RbfPolicy, cfg: TrainConfig) -> TrainReport:
    """REINFORCE over the augmented space; updates ``policy.theta`` in place."""
    if not isinstance(env, ContinuousMonitoringEnv):
        raise TypeError("train_acrl needs a continuous environment; use solve_tabular_training for tabular ones")
    rng = substream(cfg.seed, "trainer")
    report = TrainReport(theta=policy.theta.copy())
    t_start = time.perf_counter()
    window: list[float] = []
    rollout = rollout_batch_fast if cfg.compiled else rollout_batch
    for it in range(1, cfg.iterations + 1):
        s, lam = sample_augmented_start(rng, env, cfg.lambda_max, cfg.batch_size)
        noise = rng.standard_normal((cfg.horizon, cfg.batch_size, 2))
        G, fl, score = rollout(env, policy, s, lam, noise)
        policy.theta += cfg.step_size * reinforce_gradient(G, fl, score, cfg.baseline)
        window.append(float(G.mean()))
        norm = float(np.linalg.norm(policy.theta))
        if not np.isfinite(norm) or norm > cfg.max_theta_norm:
            raise DivergenceError(f"theta norm {norm:.3e} exceeded {cfg.max_theta_norm:.1e} at iteration {it}")
        if cfg.log_every and it % cfg.log_every == 0:
            report.curve_iteration.append(it)
            report.curve_return.append(float(np.mean(window)))
            report.curve_theta_norm.append(norm)
            log.debug("iteration %d: mean return %.4f, |theta| %.3f", it, report.curve_return[-1], norm)
            window.clear()
        if cfg.checkpoint_every and cfg.checkpoint_dir and it % cfg.checkpoint_every == 0:
            policy.save(Path(cfg.checkpoint_dir) / f"policy_{it:08d}.npz")
    report.theta = policy.theta.copy()
    report.wall_clock = time.perf_counter() - t_start
    return report


def solve_tabular_training(mdp: TabularCmdp, lambda_grid) -> list:
    """Exact Lagrangian maximizer at every grid point (one report per row of ``lambda_grid``)."""
    grid = np.asarray(lambda_grid, dtype=float)
    if grid.size == 0:
        return []
    return solve_lagrangian_batch(mdp, np.atleast_2d(grid))


def tabular_grid_policy(mdp: TabularCmdp, lambda_max: float, step: float = 0.05) -> GridLookupPolicy:
    """Nearest-grid-point lookup over ``[0, lambda_max]^m`` at resolution ``step``."""
    import itertools

    axis = np.arange(0.0, lambda_max + 0.5 * step, step)
    grid = np.array(list(itertools.product(axis, repeat=mdp.n_constraints)))
    return GridLookupPolicy(grid, solve_tabular_training(mdp, grid))
