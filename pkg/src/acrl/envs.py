"""Environments for constrained monitoring tasks.

Two environments share one interface:

* :class:`TabularCmdp` -- finite constrained MDP; :func:`monitoring_mdp3` builds
  the three-state monitoring instance (states ``R0, R1, R2``, the action is the
  next state).
* :class:`ContinuousMonitoringEnv` -- a point agent in a box that must spend
  fractions of its time inside rectangular regions.

Both expose ``initial_state(rng)``, ``step(state, action, rng)`` and
``reward_at(state, action)``.  A reward vector is a float array ordered
``(r_0, r_1, ..., r_m)``: the objective first, then one entry per constraint.
Environments are immutable; the caller owns the trajectory state.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

R0, R1, R2 = 0, 1, 2


class EnvError(ValueError):
    """Invalid environment definition or inadmissible step."""


def reward_bound(thresholds: Sequence[float]) -> float:
    """Bound ``B`` with ``|r_i - c_i| <= B`` for indicator rewards."""
    c = np.asarray(thresholds, dtype=float)
    if c.size == 0:
        return 0.0
    return float(np.max(np.maximum(1.0 - c, c)))


@dataclass(frozen=True, eq=False)
class TabularCmdp:
    """Finite constrained MDP.

    ``transition[s, a]`` is the distribution of the next state, ``rewards[i, s, a]``
    the i-th reward (index 0 is the objective) and ``actions_per_state[s]`` the
    admissible action indices at ``s``.
    """

    transition: np.ndarray
    rewards: np.ndarray
    thresholds: np.ndarray
    actions_per_state: tuple[tuple[int, ...], ...]
    initial: int = 0
    state_names: tuple[str, ...] | None = None

    def __post_init__(self):
        P = np.asarray(self.transition, dtype=float)
        r = np.asarray(self.rewards, dtype=float)
        c = np.atleast_1d(np.asarray(self.thresholds, dtype=float))
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "rewards", r)
        object.__setattr__(self, "thresholds", c)
        object.__setattr__(
            self, "actions_per_state", tuple(tuple(int(a) for a in acts) for acts in self.actions_per_state)
        )
        if P.ndim != 3 or P.shape[0] != P.shape[2]:
            raise EnvError(f"transition must have shape (S, A, S), got {P.shape}")
        S, A, _ = P.shape
        if r.shape != (c.size + 1, S, A):
            raise EnvError(f"rewards must have shape (m+1, S, A) = {(c.size + 1, S, A)}, got {r.shape}")
        if len(self.actions_per_state) != S:
            raise EnvError("actions_per_state needs one entry per state")
        for s, acts in enumerate(self.actions_per_state):
            if not acts:
                raise EnvError(f"state {s} has no admissible action")
            for a in acts:
                if not 0 <= a < A:
                    raise EnvError(f"state {s}: action index {a} out of range [0, {A})")
                row = P[s, a]
                if np.any(row < 0) or abs(row.sum() - 1.0) > 1e-12:
                    raise EnvError(f"transition row ({s}, {a}) is not a probability vector")
        if not 0 <= self.initial < S:
            raise EnvError(f"initial state {self.initial} out of range")

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def n_constraints(self) -> int:
        return self.thresholds.size

    @property
    def reward_bound(self) -> float:
        return reward_bound(self.thresholds)

    def admissible_mask(self) -> np.ndarray:
        mask = np.zeros((self.n_states, self.n_actions), dtype=bool)
        for s, acts in enumerate(self.actions_per_state):
            mask[s, list(acts)] = True
        return mask

    def with_thresholds(self, thresholds: Sequence[float]) -> "TabularCmdp":
        return TabularCmdp(
            self.transition, self.rewards, np.asarray(thresholds, dtype=float),
            self.actions_per_state, self.initial, self.state_names,
        )

    def initial_state(self, rng: np.random.Generator | None = None) -> int:
        return self.initial

    def reward_at(self, state: int, action: int) -> np.ndarray:
        return self.rewards[:, state, action].copy()

    def step(self, state: int, action: int, rng: np.random.Generator | None = None) -> tuple[int, np.ndarray]:
        state, action = int(state), int(action)
        if action not in self.actions_per_state[state]:
            raise EnvError(
                f"action {self._name(action)} is not admissible in state {self._name(state)}; "
                f"allowed: {[self._name(a) for a in self.actions_per_state[state]]}"
            )
        row = self.transition[state, action]
        nxt = int(np.argmax(row))
        if row[nxt] != 1.0:
            if rng is None:
                raise EnvError("stochastic transition requires an rng")
            nxt = int(rng.choice(self.n_states, p=row))
        return nxt, self.rewards[:, state, action].copy()

    def _name(self, idx: int) -> str:
        if self.state_names is not None and idx < len(self.state_names):
            return self.state_names[idx]
        return str(idx)


def monitoring_mdp3(c: float | Sequence[float] = 1.0 / 3.0) -> TabularCmdp:
    """Three-state monitoring CMDP with next state equal to the action.

    From ``R0`` the agent may go to ``R1`` or ``R2``; from ``Ri`` it may stay or
    return to ``R0``.  Reward ``i`` is the indicator of being in ``Ri``.
    """
    thresholds = np.broadcast_to(np.asarray(c, dtype=float), (2,)).copy()
    S = 3
    P = np.zeros((S, S, S))
    for s in range(S):
        for a in range(S):
            P[s, a, a] = 1.0
    rewards = np.zeros((3, S, S))
    for i in range(3):
        rewards[i, i, :] = 1.0
    return TabularCmdp(
        transition=P,
        rewards=rewards,
        thresholds=thresholds,
        actions_per_state=((R1, R2), (R0, R1), (R0, R2)),
        initial=R0,
        state_names=("R0", "R1", "R2"),
    )


def default_regions() -> np.ndarray:
    """Four 2x2 squares centred at (2,2), (2,8), (8,2), (8,8) as ``[x0, y0, x1, y1]``."""
    centers = np.array([[2.0, 2.0], [2.0, 8.0], [8.0, 2.0], [8.0, 8.0]])
    return np.hstack([centers - 1.0, centers + 1.0])


DEFAULT_CONTINUOUS_THRESHOLDS = (0.20, 0.15, 0.10, 0.05)


@dataclass(frozen=True, eq=False)
class ContinuousMonitoringEnv:
    """Point agent in an axis-aligned box with rectangular monitoring regions.

    Motion: ``s' = clip(s + a * min(1, max_step / |a|), bounds)``.  Rewards are
    evaluated at the state *after* the move; ``r_0`` is identically zero.
    """

    regions: np.ndarray = field(default_factory=default_regions)
    thresholds: np.ndarray = field(default_factory=lambda: np.array(DEFAULT_CONTINUOUS_THRESHOLDS))
    low: np.ndarray = field(default_factory=lambda: np.zeros(2))
    high: np.ndarray = field(default_factory=lambda: np.full(2, 10.0))
    max_step: float = 1.0

    def __post_init__(self):
        regions = np.atleast_2d(np.asarray(self.regions, dtype=float))
        c = np.atleast_1d(np.asarray(self.thresholds, dtype=float))
        low = np.asarray(self.low, dtype=float)
        high = np.asarray(self.high, dtype=float)
        object.__setattr__(self, "regions", regions)
        object.__setattr__(self, "thresholds", c)
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)
        if low.shape != (2,) or high.shape != (2,) or np.any(high <= low):
            raise EnvError("bounds must be two increasing 2-vectors")
        if regions.shape != (c.size, 4):
            raise EnvError(f"need one [x0, y0, x1, y1] rectangle per threshold, got {regions.shape} for {c.size}")
        if np.any(regions[:, 2] <= regions[:, 0]) or np.any(regions[:, 3] <= regions[:, 1]):
            raise EnvError("region rectangles must have positive extent")
        if np.any(regions[:, :2] < low) or np.any(regions[:, 2:] > high):
            raise EnvError("region rectangles must lie inside the bounds")
        if not self.max_step > 0:
            raise EnvError("max_step must be positive")
        if c.sum() >= 1.0 and self.regions_disjoint():
            raise EnvError(f"thresholds sum to {c.sum():.6g} >= 1 with disjoint regions: infeasible")

    @property
    def n_constraints(self) -> int:
        return self.thresholds.size

    @property
    def reward_bound(self) -> float:
        return reward_bound(self.thresholds)

    def regions_disjoint(self) -> bool:
        R = self.regions
        for i in range(len(R)):
            for j in range(i + 1, len(R)):
                overlap_x = min(R[i, 2], R[j, 2]) > max(R[i, 0], R[j, 0])
                overlap_y = min(R[i, 3], R[j, 3]) > max(R[i, 1], R[j, 1])
                if overlap_x and overlap_y:
                    return False
        return True

    def region_centers(self) -> np.ndarray:
        return 0.5 * (self.regions[:, :2] + self.regions[:, 2:])

    def initial_state(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.low, self.high)

    def initial_states(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.low, self.high, size=(n, 2))

    def inside(self, states: np.ndarray) -> np.ndarray:
        """Membership matrix of shape ``(..., m)``; rectangles are closed."""
        s = np.asarray(states, dtype=float)[..., None, :]
        R = self.regions
        return np.all((s >= R[:, :2]) & (s <= R[:, 2:]), axis=-1)

    def reward_at(self, state, action=None) -> np.ndarray:
        return self.rewards_batch(np.asarray(state, dtype=float)[None])[0]

    def rewards_batch(self, states: np.ndarray) -> np.ndarray:
        ind = self.inside(states).astype(float)
        return np.concatenate([np.zeros(ind.shape[:-1] + (1,)), ind], axis=-1)

    def move_batch(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        norm = np.linalg.norm(actions, axis=-1, keepdims=True)
        scale = np.minimum(1.0, self.max_step / np.maximum(norm, 1e-300))
        return np.clip(states + actions * scale, self.low, self.high)

    def step_batch(self, states: np.ndarray, actions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        nxt = self.move_batch(states, actions)
        return nxt, self.rewards_batch(nxt)

    def step(self, state, action, rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
        a = np.asarray(action, dtype=float)
        if a.shape != (2,) or not np.all(np.isfinite(a)):
            raise EnvError(f"continuous action must be a finite 2-vector, got {action!r}")
        nxt, r = self.step_batch(np.asarray(state, dtype=float)[None], a[None])
        return nxt[0], r[0]
