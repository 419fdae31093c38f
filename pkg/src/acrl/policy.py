"""Policies over the augmented state ``(s, lambda)``.

Tabular side: exact Lagrangian maximizers of a :class:`~acrl.envs.TabularCmdp`
via relative value iteration, plus exact stationary evaluation used as an
oracle.  Continuous side: :class:`RbfPolicy`, a Gaussian policy whose mean is
a linear combination of Gaussian kernels on a product grid over ``S x Lambda``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .envs import TabularCmdp

try:
    import numba as _numba
except ImportError:  # pragma: no cover
    _numba = None

TIE_TOL = 1e-9
CERTIFY_MARGIN = 1e-7  # certified choices must win every state by at least this much


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


# ---------------------------------------------------------------- tabular


@dataclass(frozen=True, eq=False)
class TabularPolicy:
    """Per-state action distribution; ``probs[s, a]`` is zero off the admissible set."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=float)
        object.__setattr__(self, "probs", p)
        if p.ndim != 2:
            raise ValueError("probs must be a (S, A) table")
        if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("every policy row must be a probability vector")

    def check_support(self, mdp: TabularCmdp) -> None:
        if np.any(self.probs[~mdp.admissible_mask()] > 0):
            raise ValueError("policy puts mass on inadmissible actions")

    def action(self, state: int, u: float) -> int:
        """Inverse-CDF sample from the row of ``state`` given a uniform ``u``."""
        row = self.probs[state]
        a = int(np.searchsorted(np.cumsum(row), u, side="right"))
        if a >= row.size:
            a = int(np.flatnonzero(row)[-1])
        return a

    @classmethod
    def deterministic(cls, choice, n_actions: int) -> "TabularPolicy":
        probs = np.zeros((len(choice), n_actions))
        probs[np.arange(len(choice)), list(choice)] = 1.0
        return cls(probs)

    @classmethod
    def uniform(cls, mdp: TabularCmdp) -> "TabularPolicy":
        mask = mdp.admissible_mask().astype(float)
        return cls(mask / mask.sum(axis=1, keepdims=True))


@dataclass(frozen=True, eq=False)
class LagrangianSolveReport:
    policy: TabularPolicy
    gain: float
    bias: np.ndarray
    maximizer_multiplicity: bool
    argmax_sets: tuple[tuple[int, ...], ...]
    iterations: int
    residual: float


def _lagrangian_reward_tables(mdp: TabularCmdp, lams: np.ndarray) -> np.ndarray:
    """``r_lambda[g, s, a]`` for a batch of multipliers ``lams[g]``."""
    r = mdp.rewards
    return r[0][None] + np.einsum("gi,isa->gsa", lams, r[1:] - mdp.thresholds[:, None, None])


def relative_value_iteration(
    P: np.ndarray,
    R: np.ndarray,
    mask: np.ndarray,
    *,
    tol: float = 1e-10,
    max_iter: int = 100_000,
    ref: int = 0,
    tau: float = 0.5,
):
    """Batched relative value iteration for average-reward MDPs.

    ``R`` has shape ``(G, S, A)``; the ``G`` problems share dynamics ``P``.
    Runs on the aperiodic transform ``tau I + (1 - tau) P``, which keeps gains
    and optimal policies.  Returns ``(gain[G], h[G, S], q[G, S, A], iterations,
    residual)`` where ``q`` holds ``r + P h`` in the original scaling.
    """
    G, S, A = R.shape
    h = np.zeros((G, S))
    neg = np.where(mask, 0.0, -np.inf)
    span = np.inf
    for it in range(1, max_iter + 1):
        q = R + np.einsum("sat,gt->gsa", P, h)
        Th = tau * h + (1.0 - tau) * (q + neg).max(axis=2)
        diff = Th - h
        span = float(np.max(diff.max(axis=1) - diff.min(axis=1)))
        gain = 0.5 * (diff.max(axis=1) + diff.min(axis=1)) / (1.0 - tau)
        h = Th - Th[:, ref : ref + 1]
        if span < tol:
            break
    else:
        raise ConvergenceError(f"relative value iteration did not converge in {max_iter} sweeps", span)
    # back to the original scale: h_tau = h / (1 - tau)
    h = h / (1.0 - tau)
    q = R + np.einsum("sat,gt->gsa", P, h) + neg
    return gain, h, q, it, span


def _rvi_single(P, R, mask, tol, max_iter, ref, tau):
    """Loop form of :func:`relative_value_iteration` for one problem (compiled when numba is present).

    Returns ``(gain, h, q, iterations, residual)``; ``iterations > max_iter``
    signals non-convergence.
    """
    S, A = R.shape
    h = np.zeros(S)
    Th = np.zeros(S)
    q = np.empty((S, A))
    gain = 0.0
    span = np.inf
    it = 1
    while it <= max_iter:
        for s in range(S):
            best = -np.inf
            for a in range(A):
                if mask[s, a]:
                    v = R[s, a]
                    for t in range(S):
                        v += P[s, a, t] * h[t]
                    if v > best:
                        best = v
            Th[s] = tau * h[s] + (1.0 - tau) * best
        dmax = -np.inf
        dmin = np.inf
        for s in range(S):
            d = Th[s] - h[s]
            dmax = max(dmax, d)
            dmin = min(dmin, d)
        span = dmax - dmin
        gain = 0.5 * (dmax + dmin) / (1.0 - tau)
        base = Th[ref]
        for s in range(S):
            h[s] = Th[s] - base
        if span < tol:
            break
        it += 1
    for s in range(S):
        h[s] = h[s] / (1.0 - tau)
    for s in range(S):
        for a in range(A):
            if mask[s, a]:
                v = R[s, a]
                for t in range(S):
                    v += P[s, a, t] * h[t]
                q[s, a] = v
            else:
                q[s, a] = -np.inf
    return gain, h, q, it, span


if _numba is not None:
    _rvi_single = _numba.njit(cache=True)(_rvi_single)


def _solve_rows(mdp: TabularCmdp, lams: np.ndarray, tol: float, max_iter: int):
    """RVI for every multiplier row, then the greedy choice; shared by all tabular solves."""
    mask = mdp.admissible_mask()
    R = _lagrangian_reward_tables(mdp, lams)
    if _numba is None:
        gain, h, q, it, span = relative_value_iteration(mdp.transition, R, mask, tol=tol, max_iter=max_iter)
    else:
        G, S, A = R.shape
        gain, h, q = np.empty(G), np.empty((G, S)), np.empty((G, S, A))
        it, span = 0, 0.0
        for g in range(G):
            gain[g], h[g], q[g], n, res = _rvi_single(mdp.transition, R[g], mask, tol, max_iter, 0, 0.5)
            if n > max_iter:
                raise ConvergenceError(f"relative value iteration did not converge in {max_iter} sweeps", res)
            it, span = max(it, n), max(span, res)
    choice, ties = _greedy(q, mask)
    return R, gain, h, choice, ties, it, span


def _greedy(q: np.ndarray, mask: np.ndarray):
    """Lowest-index argmax per state plus the tie sets within ``TIE_TOL``."""
    best = q.max(axis=-1, keepdims=True)
    ties = (q >= best - TIE_TOL) & mask
    choice = np.argmax(ties, axis=-1)
    return choice, ties


def solve_lagrangian_batch(mdp: TabularCmdp, lams, *, tol: float = 1e-10, max_iter: int = 100_000):
    """Solve the Lagrangian MDP for every row of ``lams``; returns a list of reports."""
    lams = np.atleast_2d(np.asarray(lams, dtype=float))
    if lams.shape[1] != mdp.n_constraints:
        raise ValueError(f"lambda must have {mdp.n_constraints} components")
    R, gain, h, choice, ties, it, span = _solve_rows(mdp, lams, tol, max_iter)
    # exact gain of the greedy (gain-conserving) policy from the initial state
    S = mdp.n_states
    P_pi = mdp.transition[np.arange(S)[None, :], choice]
    r_pi = np.take_along_axis(R, choice[..., None], axis=2)[..., 0]
    exact = np.einsum("gt,gt->g", cesaro_limit(P_pi)[:, mdp.initial, :], r_pi)
    gain = np.where(np.abs(exact - gain) < 1e-6, exact, gain)
    reports = []
    for g in range(lams.shape[0]):
        sets = tuple(tuple(int(a) for a in np.flatnonzero(ties[g, s])) for s in range(mdp.n_states))
        reports.append(
            LagrangianSolveReport(
                policy=TabularPolicy.deterministic(choice[g], mdp.n_actions),
                gain=float(gain[g]),
                bias=h[g].copy(),
                maximizer_multiplicity=any(len(t) > 1 for t in sets),
                argmax_sets=sets,
                iterations=it,
                residual=span,
            )
        )
    return reports


def solve_lagrangian_tabular(mdp: TabularCmdp, lam, **kw) -> LagrangianSolveReport:
    """Gain-optimal deterministic policy for reward ``r_lambda``; ties go to the lowest action index."""
    return solve_lagrangian_batch(mdp, np.asarray(lam, dtype=float)[None], **kw)[0]


class ExactMaximizerPolicy:
    """``pi(s, lambda)`` given by the exact Lagrangian maximizer.

    Full solves are memoised per ``lambda``.  :meth:`table` first tries to
    certify an already-seen deterministic policy (the last one first) at the
    new multiplier: it solves that policy's gain/bias equations and accepts it when
    the policy is greedy (with the same tie rule) with respect to its own
    bias, i.e. when the bias solves the optimality equation, and wins every
    state by a margin.  Without ties that fixed point is the one relative
    value iteration reaches, so the answer matches a fresh solve; otherwise
    it falls back to one.
    """

    def __init__(self, mdp: TabularCmdp, max_cache: int = 200_000, ref: int = 0):
        self.mdp = mdp
        self._cache: dict[bytes, LagrangianSolveReport] = {}
        self.max_cache = max_cache
        self.ref = ref
        self._tables: dict[tuple[int, ...], np.ndarray] = {}
        self._last: tuple[int, ...] | None = None
        self._affine: dict = {}
        self._neg = np.where(mdp.admissible_mask(), 0.0, -np.inf)
        self._rc = mdp.rewards[1:] - mdp.thresholds[:, None, None]
        self.full_solves = 0

    def report(self, lam) -> LagrangianSolveReport:
        lam = np.asarray(lam, dtype=float)
        key = lam.tobytes()
        rep = self._cache.get(key)
        if rep is None:
            rep = solve_lagrangian_tabular(self.mdp, lam)
            self.full_solves += 1
            if len(self._cache) >= self.max_cache:
                self._cache.clear()
            self._cache[key] = rep
        return rep

    def _affine_q(self, choice: tuple[int, ...]):
        """``q(lambda) = q0 + sum_i lambda_i Q[i]`` for the bias of deterministic ``choice``, or None."""
        if choice in self._affine:
            return self._affine[choice]
        mdp = self.mdp
        S = mdp.n_states
        idx = np.arange(S)
        ch = np.asarray(choice)
        parts = np.concatenate([mdp.rewards[:1], self._rc])  # (m+1, S, A), affine pieces of r_lambda
        M = np.eye(S) - mdp.transition[idx, ch]
        M[:, self.ref] = 1.0
        out = None
        try:
            X = np.linalg.solve(M, parts[:, idx, ch].T)  # (S, m+1)
        except np.linalg.LinAlgError:
            X = None
        if X is not None and np.all(np.isfinite(X)) and np.abs(X).max() < 1e12:
            X[self.ref] = 0.0
            q = parts + np.einsum("sat,tj->jsa", mdp.transition, X)
            out = (q[0] + self._neg, q[1:].reshape(q.shape[0] - 1, -1), ch)
        self._affine[choice] = out
        return out

    def certify(self, lam, choice) -> bool:
        """True when deterministic ``choice`` is the solver's maximizer at ``lam``.

        The policy's bias (reference-normalised) solves the optimality
        equation iff the policy is greedy with respect to it.
        """
        return self._certify(np.asarray(lam, dtype=float), tuple(int(a) for a in choice))

    def _certify(self, lam: np.ndarray, key: tuple[int, ...]) -> bool:
        aff = self._affine_q(key)
        if aff is None:
            return False
        q0, Q, ch = aff
        q = q0 + (lam @ Q).reshape(q0.shape)
        best = q.max(axis=1)
        # near a tie the bias is not unique (several gain-optimal policies,
        # possibly multichain), so only relative value iteration decides;
        # every state has one action at its max, so a larger count means a tie
        if np.count_nonzero(q >= best[:, None] - CERTIFY_MARGIN) != q.shape[0]:
            return False
        return bool((q.argmax(axis=1) == ch).all())

    def table(self, lam) -> np.ndarray:
        lam = np.asarray(lam, dtype=float)
        if self._last is not None and self._certify(lam, self._last):
            return self._tables[self._last]
        for choice in self._tables:
            if choice != self._last and self._certify(lam, choice):
                self._last = choice
                return self._tables[choice]
        key = lam.tobytes()
        rep = self._cache.get(key)
        if rep is not None:
            choice = tuple(int(a) for a in rep.policy.probs.argmax(axis=1))
        else:
            # choice only: skips the exact gain and report assembly of a full solve
            choice = tuple(int(a) for a in _solve_rows(self.mdp, lam[None], 1e-10, 100_000)[3][0])
            self.full_solves += 1
        self._last = choice
        if choice not in self._tables:
            self._tables[choice] = TabularPolicy.deterministic(choice, self.mdp.n_actions).probs
        return self._tables[choice]

    def distribution(self, state: int, lam) -> np.ndarray:
        return self.table(lam)[state]


class GridLookupPolicy:
    """Tabular ``pi(s, lambda)`` read from solves on a multiplier grid (nearest grid point)."""

    def __init__(self, grid: np.ndarray, reports):
        self.grid = np.atleast_2d(np.asarray(grid, dtype=float))
        self.reports = list(reports)
        if len(self.reports) != self.grid.shape[0]:
            raise ValueError("one report per grid point")

    def report(self, lam) -> LagrangianSolveReport:
        d = np.sum((self.grid - np.asarray(lam, dtype=float)) ** 2, axis=1)
        return self.reports[int(np.argmin(d))]

    def table(self, lam) -> np.ndarray:
        return self.report(lam).policy.probs

    def distribution(self, state: int, lam) -> np.ndarray:
        return self.table(lam)[state]


class StaticTabularPolicy:
    """Ignores ``lambda``; wraps one fixed :class:`TabularPolicy`."""

    def __init__(self, policy: TabularPolicy):
        self.policy = policy

    def table(self, lam=None) -> np.ndarray:
        return self.policy.probs

    def distribution(self, state: int, lam=None) -> np.ndarray:
        return self.policy.probs[state]


def chain_matrix(mdp: TabularCmdp, policy: TabularPolicy) -> np.ndarray:
    return np.einsum("sa,sat->st", policy.probs, mdp.transition)


def cesaro_limit(P: np.ndarray, squarings: int = 64) -> np.ndarray:
    """Limit of ``(1/N) sum_n P^n`` computed as ``lim ((I + P)/2)^n`` by repeated squaring.

    Accepts a single chain ``(S, S)`` or a stack ``(..., S, S)``.
    """
    M = 0.5 * (np.eye(P.shape[-1]) + P)
    for _ in range(squarings):
        M = M @ M
        M /= M.sum(axis=-1, keepdims=True)
    return M


def evaluate_policy(mdp: TabularCmdp, policy: TabularPolicy) -> np.ndarray:
    """Exact long-run averages ``V[i, s0]`` of every reward from every start state."""
    Pstar = cesaro_limit(chain_matrix(mdp, policy))
    r_pi = np.einsum("sa,isa->is", policy.probs, mdp.rewards)
    return r_pi @ Pstar.T


def state_occupation(mdp: TabularCmdp, policy: TabularPolicy, start: int | None = None) -> np.ndarray:
    s0 = mdp.initial if start is None else start
    return cesaro_limit(chain_matrix(mdp, policy))[s0]


def deterministic_policies(mdp: TabularCmdp):
    """Every deterministic stationary policy (product of the admissible sets)."""
    for choice in itertools.product(*mdp.actions_per_state):
        yield TabularPolicy.deterministic(choice, mdp.n_actions)


# ---------------------------------------------------------------- RBF-Gaussian


def _kernel(x: np.ndarray, centers: np.ndarray, bandwidth: np.ndarray) -> np.ndarray:
    z = (x[..., None, :] - centers) / bandwidth
    return np.exp(-0.5 * np.sum(z * z, axis=-1))


class RbfPolicy:
    """Gaussian policy ``a ~ N(mean(s, lambda), sigma^2 I)`` with RBF mean.

    Kernel centers form the product of a spatial grid (``Ns`` points) and a
    multiplier grid (``Nl`` points); feature ``k = i * Nl + j`` is
    ``phi_s[i](s) * phi_l[j](lambda)`` so that ``theta`` is a ``(Ns*Nl, 2)``
    matrix.  Multipliers are clamped to ``[0, lambda_max]`` before features
    are evaluated.
    """

    def __init__(
        self,
        spatial_centers,
        lambda_centers,
        spatial_bandwidth,
        lambda_bandwidth,
        sigma: float = 0.5,
        lambda_max: float = 1.0,
        theta=None,
    ):
        self.spatial_centers = np.atleast_2d(np.asarray(spatial_centers, dtype=float))
        self.lambda_centers = np.atleast_2d(np.asarray(lambda_centers, dtype=float))
        self.spatial_bandwidth = np.broadcast_to(
            np.asarray(spatial_bandwidth, dtype=float), (self.spatial_centers.shape[1],)
        ).copy()
        self.lambda_bandwidth = np.broadcast_to(
            np.asarray(lambda_bandwidth, dtype=float), (self.lambda_centers.shape[1],)
        ).copy()
        self.sigma = float(sigma)
        self.lambda_max = float(lambda_max)
        if np.any(self.spatial_bandwidth <= 0) or np.any(self.lambda_bandwidth <= 0):
            raise ValueError("bandwidths must be positive")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not (np.all(np.isfinite(self.spatial_centers)) and np.all(np.isfinite(self.lambda_centers))):
            raise ValueError("kernel centers must be finite")
        K = self.n_spatial * self.n_lambda
        self.theta = np.zeros((K, 2)) if theta is None else np.array(theta, dtype=float).reshape(K, 2)

    @classmethod
    def grid(
        cls,
        low,
        high,
        m: int,
        lambda_max: float,
        n_spatial: int = 6,
        n_lambda: int = 3,
        sigma: float = 0.5,
        bandwidth_scale: float = 1.5,
        lambda_bandwidth_scale: float | None = None,
    ) -> "RbfPolicy":
        """Uniform center grid over the box times ``[0, lambda_max]^m``.

        Bandwidths are ``bandwidth_scale`` times the center spacing; the
        multiplier axes use ``lambda_bandwidth_scale`` when given.
        """
        if not lambda_max > 0:
            raise ValueError("lambda_max must be positive to lay out multiplier kernels")
        low = np.asarray(low, dtype=float)
        high = np.asarray(high, dtype=float)
        axes = [np.linspace(low[d], high[d], n_spatial) for d in range(2)]
        spatial = np.array(list(itertools.product(*axes)))
        lam_axis = np.linspace(0.0, lambda_max, n_lambda)
        lam_centers = np.array(list(itertools.product(lam_axis, repeat=m)))
        s_spacing = (high - low) / max(n_spatial - 1, 1)
        l_spacing = lambda_max / max(n_lambda - 1, 1)
        l_scale = bandwidth_scale if lambda_bandwidth_scale is None else lambda_bandwidth_scale
        return cls(spatial, lam_centers, bandwidth_scale * s_spacing, l_scale * l_spacing, sigma, lambda_max)

    @property
    def n_spatial(self) -> int:
        return self.spatial_centers.shape[0]

    @property
    def n_lambda(self) -> int:
        return self.lambda_centers.shape[0]

    @property
    def n_features(self) -> int:
        return self.n_spatial * self.n_lambda

    @property
    def centers(self) -> np.ndarray:
        """All ``K`` centers in the augmented space, rows ``(s, lambda)``."""
        s = np.repeat(self.spatial_centers, self.n_lambda, axis=0)
        lam = np.tile(self.lambda_centers, (self.n_spatial, 1))
        return np.hstack([s, lam])

    def copy(self) -> "RbfPolicy":
        return RbfPolicy(
            self.spatial_centers, self.lambda_centers, self.spatial_bandwidth, self.lambda_bandwidth,
            self.sigma, self.lambda_max, self.theta.copy(),
        )

    def _check_theta(self):
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("policy parameters are not finite")

    def spatial_features(self, s) -> np.ndarray:
        return _kernel(np.asarray(s, dtype=float), self.spatial_centers, self.spatial_bandwidth)

    def lambda_features(self, lam) -> np.ndarray:
        lam = np.clip(np.asarray(lam, dtype=float), 0.0, self.lambda_max)
        return _kernel(lam, self.lambda_centers, self.lambda_bandwidth)

    def features(self, s, lam) -> np.ndarray:
        fs = self.spatial_features(s)
        fl = self.lambda_features(lam)
        return (fs[..., :, None] * fl[..., None, :]).reshape(fs.shape[:-1] + (self.n_features,))

    def mean_from_features(self, fs: np.ndarray, fl: np.ndarray) -> np.ndarray:
        """Mean for batches of spatial features ``(n, Ns)`` and multiplier features ``(n, Nl)``."""
        T = self.theta.reshape(self.n_spatial, self.n_lambda * 2)
        partial = (fs @ T).reshape(fs.shape[:-1] + (self.n_lambda, 2))
        return np.einsum("...j,...jd->...d", fl, partial)

    def mean(self, s, lam) -> np.ndarray:
        self._check_theta()
        s = np.asarray(s, dtype=float)
        lam = np.broadcast_to(np.asarray(lam, dtype=float), s.shape[:-1] + (self.lambda_centers.shape[1],))
        return self.mean_from_features(self.spatial_features(s), self.lambda_features(lam))

    def sample(self, s, lam, rng: np.random.Generator) -> np.ndarray:
        mu = self.mean(s, lam)
        return mu + self.sigma * rng.standard_normal(mu.shape)

    def log_prob(self, s, lam, action) -> float:
        mu = self.mean(s, lam)
        d = np.asarray(action, dtype=float) - mu
        return float(-0.5 * np.sum(d * d) / self.sigma**2 - d.size * np.log(self.sigma * np.sqrt(2 * np.pi)))

    def logprob_grad(self, s, lam, action) -> np.ndarray:
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        phi = self.features(s, lam)
        u = (np.asarray(action, dtype=float) - self.mean(s, lam)) / self.sigma**2
        return np.outer(phi, u)

    # ---- checkpoints

    CHECKPOINT_VERSION = 1

    def save(self, path) -> Path:
        """Write an ``.npz`` checkpoint (format version 1).

        Arrays: ``spatial_centers``, ``lambda_centers``, ``spatial_bandwidth``,
        ``lambda_bandwidth``, ``theta``; scalars ``sigma``, ``lambda_max`` and
        ``format_version``.
        """
        path = Path(path)
        with open(path, "wb") as fh:
            np.savez(
                fh,
                format_version=np.int64(self.CHECKPOINT_VERSION),
                spatial_centers=self.spatial_centers,
                lambda_centers=self.lambda_centers,
                spatial_bandwidth=self.spatial_bandwidth,
                lambda_bandwidth=self.lambda_bandwidth,
                sigma=np.float64(self.sigma),
                lambda_max=np.float64(self.lambda_max),
                theta=self.theta,
            )
        return path

    @classmethod
    def load(cls, path) -> "RbfPolicy":
        with np.load(path) as z:
            version = int(z["format_version"])
            if version != cls.CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {version}")
            return cls(
                z["spatial_centers"], z["lambda_centers"], z["spatial_bandwidth"], z["lambda_bandwidth"],
                float(z["sigma"]), float(z["lambda_max"]), z["theta"],
            )


def rbf_action(policy: RbfPolicy, s, lam, rng: np.random.Generator) -> np.ndarray:
    return policy.sample(s, lam, rng)


def rbf_logprob_grad(policy: RbfPolicy, s, lam, action) -> np.ndarray:
    return policy.logprob_grad(s, lam, action)
