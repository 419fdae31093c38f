"""Exact ground truth for tabular CMDPs.

* :func:`solve_cmdp_lp` -- optimal constrained value and policy from the
  occupation-measure linear program.
* :func:`dual_function` -- ``d(lambda)``, the optimal gain of the Lagrangian MDP.
* :func:`certify_strong_duality` and :func:`certify_primal_recovery_gap` --
  numerical certificates for zero duality gap and for the (possibly strict)
  inclusion of constrained optima in the Lagrangian maximizer set.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .envs import TabularCmdp
from .policy import (
    TabularPolicy,
    deterministic_policies,
    evaluate_policy,
    solve_lagrangian_batch,
    solve_lagrangian_tabular,
)
from .simplex import linprog_max


class InfeasibleCmdp(ValueError):
    """No policy satisfies the constraints; carries the Farkas certificate."""

    def __init__(self, infeasibility: float, certificate: dict):
        super().__init__(f"no feasible policy (phase-1 residual {infeasibility:.3e})")
        self.infeasibility = infeasibility
        self.certificate = certificate


@dataclass
class CmdpSolution:
    value: float  # P*
    rho: np.ndarray  # (S, A) occupation measure
    policy: TabularPolicy
    unvisited_states: tuple[int, ...]
    multipliers: np.ndarray  # LP duals of the constraint rows
    pairs: list[tuple[int, int]] = field(default_factory=list)

    @property
    def state_occupation(self) -> np.ndarray:
        return self.rho.sum(axis=1)

    def values(self, mdp: TabularCmdp) -> np.ndarray:
        """``sum rho * r_i`` for every reward."""
        return np.einsum("sa,isa->i", self.rho, mdp.rewards)


def _lp_rows(mdp: TabularCmdp):
    pairs = [(s, a) for s, acts in enumerate(mdp.actions_per_state) for a in acts]
    S = mdp.n_states
    n = len(pairs)
    flow = np.zeros((S, n))
    for j, (s, a) in enumerate(pairs):
        flow[s, j] += 1.0
        flow[:, j] -= mdp.transition[s, a]
    # flow rows sum to zero; the highest-index one is redundant given normalisation
    A_eq = np.vstack([np.ones((1, n)), flow[:-1]])
    b_eq = np.concatenate([[1.0], np.zeros(S - 1)])
    R = np.array([[mdp.rewards[i, s, a] for (s, a) in pairs] for i in range(mdp.n_constraints + 1)])
    A_ub = -R[1:]
    b_ub = -mdp.thresholds
    return pairs, R, A_ub, b_ub, A_eq, b_eq


def solve_cmdp_lp(mdp: TabularCmdp, *, center: bool = True) -> CmdpSolution:
    """Maximise the long-run objective subject to ``V_i >= c_i`` over occupation measures.

    With ``center=True`` a second LP picks, among optimal measures, one that
    maximises the smallest occupation ``rho(s, a)``; this favours a measure whose
    induced policy is a single recurrent chain, so it is realisable from any
    start state.
    """
    pairs, R, A_ub, b_ub, A_eq, b_eq = _lp_rows(mdp)
    res = linprog_max(R[0], A_ub, b_ub, A_eq, b_eq)
    if res.status == "infeasible":
        raise InfeasibleCmdp(
            res.infeasibility,
            {"constraint_rows": res.farkas_ub, "equality_rows": res.farkas_eq},
        )
    if not res.success:
        raise RuntimeError(f"occupation LP ended with status {res.status}")
    value = res.objective
    rho = res.x
    multipliers = res.duals_ub
    if center:
        n = len(pairs)
        # variables (rho, t): maximise t with rho_j >= t and objective >= P* - slack
        c2 = np.zeros(n + 1)
        c2[-1] = 1.0
        A2_ub = np.vstack([
            np.hstack([A_ub, np.zeros((A_ub.shape[0], 1))]),
            np.hstack([-R[0][None], np.zeros((1, 1))]),
            np.hstack([-np.eye(n), np.ones((n, 1))]),
        ])
        b2_ub = np.concatenate([b_ub, [-(value - 1e-12)], np.zeros(n)])
        A2_eq = np.hstack([A_eq, np.zeros((A_eq.shape[0], 1))])
        res2 = linprog_max(c2, A2_ub, b2_ub, A2_eq, b_eq)
        if res2.success:
            rho = res2.x[:n]
    table = np.zeros((mdp.n_states, mdp.n_actions))
    for (s, a), v in zip(pairs, rho):
        table[s, a] = max(v, 0.0)
    table /= table.sum()
    mass = table.sum(axis=1)
    probs = np.zeros_like(table)
    unvisited = []
    mask = mdp.admissible_mask()
    for s in range(mdp.n_states):
        if mass[s] > 1e-14:
            probs[s] = table[s] / mass[s]
        else:
            probs[s] = mask[s] / mask[s].sum()
            unvisited.append(s)
    return CmdpSolution(value, table, TabularPolicy(probs), tuple(unvisited), np.asarray(multipliers), pairs)


def dual_function(mdp: TabularCmdp, lam) -> float:
    """``d(lambda) = max_pi L(pi, lambda)``: the optimal gain under ``r_lambda``."""
    lam = np.asarray(lam, dtype=float)
    if np.any(lam < 0):
        raise ValueError("dual function is defined on the nonnegative orthant")
    return solve_lagrangian_tabular(mdp, lam).gain


def dual_function_batch(mdp: TabularCmdp, lams) -> np.ndarray:
    return np.array([r.gain for r in solve_lagrangian_batch(mdp, lams)])


def lagrangian_value(mdp: TabularCmdp, policy: TabularPolicy, lam, start: int | None = None) -> float:
    """``V_0(pi) + sum_i lam_i (V_i(pi) - c_i)`` from ``start`` (default: the initial state)."""
    s0 = mdp.initial if start is None else start
    V = evaluate_policy(mdp, policy)[:, s0]
    return float(V[0] + np.dot(lam, V[1:] - mdp.thresholds))


def product_grid(low: float, high: float, step: float, m: int) -> np.ndarray:
    n = int(round((high - low) / step)) + 1
    axis = low + step * np.arange(n)
    return np.array(list(itertools.product(axis, repeat=m)))


@dataclass
class DualFunctionProbe:
    grid: np.ndarray
    values: np.ndarray
    argmin: np.ndarray
    min_value: float
    primal_value: float
    refined_grid: np.ndarray
    refined_values: np.ndarray

    @property
    def gap(self) -> float:
        return self.min_value - self.primal_value

    @property
    def weak_duality_violation(self) -> float:
        """Largest amount by which any probed ``d(lambda)`` falls below ``P*`` (0 if none)."""
        lowest = min(self.values.min(), self.refined_values.min())
        return max(0.0, self.primal_value - lowest)

    def csv_rows(self):
        m = self.grid.shape[1]
        yield [f"lambda_{i + 1}" for i in range(m)] + ["d_lambda"]
        for lam, d in zip(np.vstack([self.grid, self.refined_grid]), np.concatenate([self.values, self.refined_values])):
            yield [*lam, d]


def certify_strong_duality(
    mdp: TabularCmdp,
    lambda_grid: np.ndarray | None = None,
    *,
    refine_step: float = 0.001,
    refine_radius: float | None = None,
) -> DualFunctionProbe:
    """Minimise ``d`` over a grid, refine once around the argmin, compare with ``P*``.

    The refinement grid has spacing ``refine_step`` and spans one coarse
    spacing (or ``refine_radius``) on each side of the coarse argmin, clipped at 0.
    """
    m = mdp.n_constraints
    if lambda_grid is None:
        lambda_grid = product_grid(0.0, 3.0, 0.05, m)
    grid = np.atleast_2d(np.asarray(lambda_grid, dtype=float))
    P_star = solve_cmdp_lp(mdp, center=False).value
    values = dual_function_batch(mdp, grid)
    k = int(np.argmin(values))
    if refine_radius is None:
        spacings = [np.diff(np.unique(grid[:, i])) for i in range(m)]
        refine_radius = max((float(s.min()) for s in spacings if s.size), default=refine_step)
    n = int(round(refine_radius / refine_step))
    offsets = refine_step * np.arange(-n, n + 1)
    fine = np.array([grid[k] + np.array(o) for o in itertools.product(offsets, repeat=m)])
    fine = fine[np.all(fine >= 0, axis=1)]
    fine_values = dual_function_batch(mdp, fine)
    j = int(np.argmin(fine_values))
    if fine_values[j] < values[k]:
        argmin, dmin = fine[j], float(fine_values[j])
    else:
        argmin, dmin = grid[k], float(values[k])
    return DualFunctionProbe(grid, values, argmin, dmin, P_star, fine, fine_values)


@dataclass
class PrimalRecoveryCertificate:
    lambda_star: np.ndarray
    dual_value: float  # d(lambda*)
    lagrangian_at_optimum: float  # L(pi*, lambda*)
    inclusion_error: float  # |L(pi*, lambda*) - d(lambda*)|
    strict: bool
    witness: TabularPolicy | None  # deterministic maximizer violating a constraint
    witness_values: np.ndarray | None
    witness_violation: float

    def lines(self) -> list[str]:
        out = [
            f"lambda* = {np.array2string(self.lambda_star, precision=6)}",
            f"d(lambda*) = {self.dual_value:.17g}",
            f"L(pi*, lambda*) = {self.lagrangian_at_optimum:.17g}",
            f"inclusion error = {self.inclusion_error:.3e}",
        ]
        if self.strict:
            out.append(
                "strict: deterministic maximizer "
                f"{self.witness.probs.argmax(axis=1).tolist()} has values "
                f"{np.array2string(self.witness_values, precision=6)} (violation {self.witness_violation:.6g})"
            )
        else:
            out.append("not strict: every deterministic maximizer at lambda* is feasible")
        return out


def certify_primal_recovery_gap(
    mdp: TabularCmdp, lambda_star=None, *, tol: float = 1e-9
) -> PrimalRecoveryCertificate:
    """Check that ``pi*`` maximizes ``L(., lambda*)`` and look for an infeasible maximizer.

    ``lambda*`` defaults to the LP multipliers of the constraint rows.
    Deterministic policies are enumerated, so this is meant for small MDPs.
    """
    sol = solve_cmdp_lp(mdp)
    lam = np.asarray(sol.multipliers if lambda_star is None else lambda_star, dtype=float)
    lam = np.maximum(lam, 0.0)
    d = dual_function(mdp, lam)
    L_star = lagrangian_value(mdp, sol.policy, lam)
    witness, witness_values, worst = None, None, 0.0
    for pol in deterministic_policies(mdp):
        if abs(lagrangian_value(mdp, pol, lam) - d) > tol:
            continue
        V = evaluate_policy(mdp, pol)[:, mdp.initial]
        violation = float(np.max(mdp.thresholds - V[1:]))
        if violation > tol and violation > worst:
            witness, witness_values, worst = pol, V, violation
    return PrimalRecoveryCertificate(
        lambda_star=lam,
        dual_value=d,
        lagrangian_at_optimum=L_star,
        inclusion_error=abs(L_star - d),
        strict=witness is not None,
        witness=witness,
        witness_values=witness_values,
        witness_violation=worst,
    )
