"""Dense two-phase tableau simplex with Bland's anti-cycling rule.

Solves ``max c.x  s.t.  A_ub x <= b_ub,  A_eq x = b_eq,  x >= 0`` for the small
problems the CMDP oracle produces (at most a few hundred variables).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class LPResult:
    status: str  # "optimal" | "infeasible" | "unbounded"
    x: np.ndarray | None = None
    objective: float | None = None
    duals_ub: np.ndarray | None = None
    duals_eq: np.ndarray | None = None
    infeasibility: float = 0.0
    farkas_ub: np.ndarray | None = None
    farkas_eq: np.ndarray | None = None
    iterations: int = 0

    @property
    def success(self) -> bool:
        return self.status == "optimal"


class _Tableau:
    def __init__(self, A: np.ndarray, b: np.ndarray, tol: float):
        m, n = A.shape
        self.m, self.n, self.tol = m, n, tol
        # columns: n structural, m artificial, rhs
        self.T = np.hstack([A, np.eye(m), b[:, None]])
        self.basis = list(range(n, n + m))
        self.iterations = 0

    def pivot(self, r: int, j: int) -> None:
        T = self.T
        T[r] /= T[r, j]
        col = T[:, j].copy()
        col[r] = 0.0
        T -= np.outer(col, T[r])
        self.basis[r] = j
        self.iterations += 1

    def run(self, cost: np.ndarray, allowed: np.ndarray, max_iter: int) -> str:
        """Maximise ``cost`` over the current basis; Bland's rule for entering and leaving."""
        tol = self.tol
        for _ in range(max_iter):
            cb = cost[self.basis]
            reduced = cost - cb @ self.T[:, :-1]
            cand = np.flatnonzero((reduced > tol) & allowed)
            if cand.size == 0:
                return "optimal"
            j = int(cand[0])
            col = self.T[:, j]
            rows = np.flatnonzero(col > tol)
            if rows.size == 0:
                return "unbounded"
            ratios = self.T[rows, -1] / col[rows]
            best = ratios.min()
            tied = rows[ratios <= best + tol * max(1.0, abs(best))]
            r = int(min(tied, key=lambda i: self.basis[i]))
            self.pivot(r, j)
        raise RuntimeError(f"simplex exceeded {max_iter} pivots")


def linprog_max(c, A_ub=None, b_ub=None, A_eq=None, b_eq=None, *, tol: float = 1e-11, max_iter: int = 50_000) -> LPResult:
    c = np.asarray(c, dtype=float)
    n = c.size
    A_ub = np.zeros((0, n)) if A_ub is None else np.atleast_2d(np.asarray(A_ub, dtype=float))
    A_eq = np.zeros((0, n)) if A_eq is None else np.atleast_2d(np.asarray(A_eq, dtype=float))
    b_ub = np.zeros(0) if b_ub is None else np.atleast_1d(np.asarray(b_ub, dtype=float))
    b_eq = np.zeros(0) if b_eq is None else np.atleast_1d(np.asarray(b_eq, dtype=float))
    m_ub, m_eq = A_ub.shape[0], A_eq.shape[0]

    # standard form with slacks for the inequality rows
    A = np.zeros((m_ub + m_eq, n + m_ub))
    A[:m_ub, :n] = A_ub
    A[:m_ub, n:] = np.eye(m_ub)
    A[m_ub:, :n] = A_eq
    b = np.concatenate([b_ub, b_eq])
    sign = np.where(b < 0, -1.0, 1.0)
    A *= sign[:, None]
    b = b * sign
    m, nn = A.shape

    tab = _Tableau(A, b, tol)
    art = np.arange(nn, nn + m)
    phase1 = np.zeros(nn + m)
    phase1[art] = -1.0
    tab.run(phase1, np.ones(nn + m, dtype=bool), max_iter)
    infeas = float(tab.T[[i for i, v in enumerate(tab.basis) if v >= nn], -1].sum()) if m else 0.0
    if infeas > 1e-9:
        y = np.array([1.0 if v >= nn else 0.0 for v in tab.basis]) @ tab.T[:, nn : nn + m]
        y = y * sign
        return LPResult(
            "infeasible", infeasibility=infeas, farkas_ub=y[:m_ub], farkas_eq=y[m_ub:], iterations=tab.iterations
        )

    # drive zero-level artificials out of the basis; rows that cannot pivot are redundant
    keep = np.ones(m, dtype=bool)
    for r in range(m):
        if tab.basis[r] >= nn:
            nz = np.flatnonzero(np.abs(tab.T[r, :nn]) > 1e-9)
            if nz.size:
                tab.pivot(r, int(nz[0]))
            else:
                keep[r] = False
    if not keep.all():
        tab.T = tab.T[keep]
        tab.basis = [v for v, k in zip(tab.basis, keep) if k]

    cost = np.zeros(nn + m)
    cost[:n] = c
    allowed = np.zeros(nn + m, dtype=bool)
    allowed[:nn] = True
    status = tab.run(cost, allowed, max_iter)
    if status == "unbounded":
        return LPResult("unbounded", iterations=tab.iterations)
    x = np.zeros(nn + m)
    x[tab.basis] = tab.T[:, -1]
    # simplex multipliers y = c_B B^{-1}; B^{-1} sits in the artificial columns
    y_kept = cost[tab.basis] @ tab.T[:, nn : nn + m]
    y = y_kept * sign
    return LPResult(
        "optimal",
        x=x[:n].copy(),
        objective=float(c @ x[:n]),
        duals_ub=y[:m_ub],
        duals_eq=y[m_ub:],
        iterations=tab.iterations,
    )
