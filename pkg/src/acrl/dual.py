"""Multiplier dynamics: Lagrangian reward, projected dual descent and diagnostics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


def lagrangian_reward(reward, lam, c) -> float:
    """``r_0 + sum_i lam_i (r_i - c_i)`` for one reward vector ``(r_0, ..., r_m)``."""
    reward = np.asarray(reward, dtype=float)
    lam = np.asarray(lam, dtype=float)
    c = np.asarray(c, dtype=float)
    if reward.ndim != 1 or lam.shape != c.shape or reward.size != lam.size + 1:
        raise ValueError(
            f"dimension mismatch: reward {reward.shape}, lambda {lam.shape}, thresholds {c.shape}"
        )
    return float(reward[0] + np.dot(lam, reward[1:] - c))


def lagrangian_rewards(rewards: np.ndarray, lam: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Vectorised :func:`lagrangian_reward` over leading axes of ``rewards`` and ``lam``."""
    rewards = np.asarray(rewards, dtype=float)
    return rewards[..., 0] + np.sum(np.asarray(lam) * (rewards[..., 1:] - c), axis=-1)


@dataclass
class EpochRecord:
    """One epoch of ``T0`` steps executed under a frozen multiplier."""

    k: int
    lam: np.ndarray
    rewards: np.ndarray  # (T0, m+1)
    c: np.ndarray
    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    projection_active: np.ndarray | None = None

    @property
    def T0(self) -> int:
        return self.rewards.shape[0]

    @property
    def mean_constraint_gap(self) -> np.ndarray:
        return (self.rewards[:, 1:] - self.c).mean(axis=0)


def dual_step(lam: np.ndarray, gap: np.ndarray, eta_lambda: float) -> tuple[np.ndarray, np.ndarray]:
    """Projected step ``max(0, lam - eta * gap)``; also returns where the projection clipped."""
    raw = np.asarray(lam, dtype=float) - eta_lambda * np.asarray(gap, dtype=float)
    return np.maximum(raw, 0.0), raw < 0.0


def dual_update(lam, epoch: EpochRecord | np.ndarray, eta_lambda: float) -> np.ndarray:
    """Dual descent on the epoch's mean constraint gap ``(1/T0) sum_t (r_i - c_i)``.

    ``epoch`` may be an :class:`EpochRecord` or the mean gap vector itself.
    """
    if not eta_lambda > 0:
        raise ValueError("eta_lambda must be positive")
    gap = epoch.mean_constraint_gap if isinstance(epoch, EpochRecord) else np.asarray(epoch, dtype=float)
    return dual_step(lam, gap, eta_lambda)[0]


def deficit_identity_check(epochs: Sequence[EpochRecord], eta_lambda: float, T0: int | None = None) -> np.ndarray:
    """Compare recorded multipliers with the accumulated-deficit formula.

    With ``lam_0 = 0`` and no projection, ``lam_{i,k} = (eta/T0) sum_{t < k T0} (c_i - r_i)``.
    Each component is checked over its longest prefix of epochs without an
    active projection.  Returns the max absolute discrepancy per component
    (0 where no epoch was checkable beyond ``k = 0``).
    """
    if not epochs:
        return np.zeros(0)
    m = epochs[0].lam.size
    worst = np.zeros(m)
    if np.any(epochs[0].lam != 0.0):
        raise ValueError("deficit identity requires lam_0 = 0")
    deficit = np.zeros(m)
    alive = np.ones(m, dtype=bool)
    for prev, cur in zip(epochs[:-1], epochs[1:]):
        T = T0 if T0 is not None else prev.T0
        deficit += (prev.c - prev.rewards[:, 1:]).sum(axis=0)
        if prev.projection_active is not None:
            alive &= ~np.asarray(prev.projection_active, dtype=bool)
        if not alive.any():
            break
        formula = eta_lambda / T * deficit
        err = np.abs(cur.lam - formula)
        worst = np.where(alive, np.maximum(worst, err), worst)
    return worst


@dataclass
class SlacknessMonitor:
    """Running sum of ``lam_k . gap_k`` over epochs."""

    total: float = 0.0
    count: int = 0

    def record(self, lam, gap) -> None:
        self.total += float(np.dot(lam, gap))
        self.count += 1

    def average(self) -> float:
        return slackness_average(self)


def slackness_average(monitor: SlacknessMonitor) -> float:
    if monitor.count < 1:
        raise ValueError("slackness average needs at least one epoch")
    return monitor.total / monitor.count


@dataclass
class DualTrace:
    """Per-epoch multipliers, gaps and projection flags (rows indexed by epoch)."""

    lam: np.ndarray
    gap: np.ndarray
    active: np.ndarray

    @classmethod
    def empty(cls, K: int, m: int) -> "DualTrace":
        return cls(np.zeros((K, m)), np.zeros((K, m)), np.zeros((K, m), dtype=bool))

    @property
    def K(self) -> int:
        return self.lam.shape[0]

    def csv_rows(self):
        m = self.lam.shape[1]
        header = ["k"] + [f"lambda_{i + 1}" for i in range(m)] + [f"gap_{i + 1}" for i in range(m)] + [
            f"projection_active_{i + 1}" for i in range(m)
        ]
        yield header
        for k in range(self.K):
            yield [k, *self.lam[k], *self.gap[k], *self.active[k].astype(int)]
