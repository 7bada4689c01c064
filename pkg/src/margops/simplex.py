"""Dense two-phase simplex with Bland's anti-cycling rule.

Meant for desk-scale problems (up to about a thousand variables).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PIVOT_TOL = 1e-10
FEAS_TOL = 1e-9


class SimplexError(RuntimeError):
    """Raised when the iteration guard trips."""


@dataclass(eq=False)
class LpProblem:
    """``min c.x + offset`` subject to ``A_eq x = b_eq``, ``A_ub x <= b_ub`` and bounds.

    ``bounds`` holds one ``(lower, upper)`` pair per variable, ``None`` for
    an infinite side. It defaults to ``(0, None)`` for every variable.
    """

    objective: np.ndarray
    A_eq: np.ndarray | None = None
    b_eq: np.ndarray | None = None
    A_ub: np.ndarray | None = None
    b_ub: np.ndarray | None = None
    bounds: list | None = None
    offset: float = 0.0

    def __post_init__(self):
        c = np.asarray(self.objective, dtype=float).reshape(-1)
        n = c.size
        self.objective = c
        self.A_eq, self.b_eq = _rows(self.A_eq, self.b_eq, n, "equality")
        self.A_ub, self.b_ub = _rows(self.A_ub, self.b_ub, n, "inequality")
        if self.bounds is None:
            self.bounds = [(0.0, None)] * n
        if len(self.bounds) != n:
            raise ValueError(f"expected {n} variable bounds, got {len(self.bounds)}")
        for lo, hi in self.bounds:
            if lo is not None and hi is not None and lo > hi:
                raise ValueError(f"empty bound interval [{lo}, {hi}]")
        for arr in (c, self.A_eq, self.b_eq, self.A_ub, self.b_ub):
            if not np.all(np.isfinite(arr)):
                raise ValueError("LP coefficients must be finite")

    @property
    def n_vars(self) -> int:
        return self.objective.size


def _rows(a, b, n, kind):
    if a is None:
        return np.zeros((0, n)), np.zeros(0)
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.asarray(b, dtype=float).reshape(-1)
    if a.shape != (b.size, n):
        raise ValueError(f"{kind} constraints have shape {a.shape}, rhs {b.shape}, {n} variables")
    return a, b


@dataclass(frozen=True, eq=False)
class LpSolution:
    status: str  # optimal | infeasible | unbounded
    values: np.ndarray | None
    objective_value: float
    iterations: int = 0


def _pivot(t: np.ndarray, basis: np.ndarray, row: int, col: int) -> None:
    t[row] /= t[row, col]
    col_vals = t[:, col].copy()
    col_vals[row] = 0.0
    t -= np.outer(col_vals, t[row])
    basis[row] = col


def _run(t: np.ndarray, basis: np.ndarray, allowed: np.ndarray, max_iter: int) -> tuple[str, int]:
    """Minimise the last-row objective of tableau ``t`` in place (Bland's rule)."""
    for it in range(max_iter):
        reduced = t[-1, :-1]
        candidates = np.flatnonzero(allowed & (reduced < -PIVOT_TOL))
        if candidates.size == 0:
            return "optimal", it
        col = candidates[0]
        column = t[:-1, col]
        pos = column > PIVOT_TOL
        if not np.any(pos):
            return "unbounded", it
        ratios = np.full(column.size, np.inf)
        ratios[pos] = t[:-1, -1][pos] / column[pos]
        best = ratios.min()
        ties = np.flatnonzero(ratios <= best + PIVOT_TOL * max(1.0, abs(best)))
        row = ties[np.argmin(basis[ties])]
        _pivot(t, basis, row, col)
    raise SimplexError(f"simplex did not terminate within {max_iter} pivots")


def _standard_form(p: LpProblem):
    """Rewrite as ``min c'.z`` with ``A z = b``, ``z >= 0``.

    Also returns the map ``x = shift + M z[:k]`` back to the original
    variables.
    """
    n = p.n_vars
    cols, shift = [], np.zeros(n)
    extra_ub_rows, extra_ub_rhs = [], []
    for j, (lo, hi) in enumerate(p.bounds):
        if lo is not None:
            shift[j] = lo
            cols.append((j, 1.0))
            if hi is not None:
                row = np.zeros(n)
                row[j] = 1.0
                extra_ub_rows.append(row)
                extra_ub_rhs.append(hi)
        elif hi is not None:
            shift[j] = hi
            cols.append((j, -1.0))
        else:
            cols.append((j, 1.0))
            cols.append((j, -1.0))
    k = len(cols)
    m_map = np.zeros((n, k))
    for i, (j, s) in enumerate(cols):
        m_map[j, i] = s
    a_ub = np.vstack([p.A_ub] + ([np.array(extra_ub_rows)] if extra_ub_rows else []))
    b_ub = np.concatenate([p.b_ub, np.array(extra_ub_rhs)])
    # bound rows are written on x; substitute x = shift + M z
    b_ub = b_ub - a_ub @ shift
    b_eq = p.b_eq - p.A_eq @ shift
    a_ub_z = a_ub @ m_map
    a_eq_z = p.A_eq @ m_map
    n_ub = a_ub_z.shape[0]
    a = np.block([[a_eq_z, np.zeros((a_eq_z.shape[0], n_ub))], [a_ub_z, np.eye(n_ub)]])
    b = np.concatenate([b_eq, b_ub])
    c = np.concatenate([p.objective @ m_map, np.zeros(n_ub)])
    return a, b, c, k, m_map, shift


def simplex_solve(problem: LpProblem, max_iter: int | None = None) -> LpSolution:
    a, b, c, k, m_map, shift = _standard_form(problem)
    m, n = a.shape
    neg = b < 0
    a[neg] *= -1.0
    b[neg] *= -1.0
    if max_iter is None:
        max_iter = 50 * (m + n) + 1000
    # phase one: artificial basis
    t = np.zeros((m + 1, n + m + 1))
    t[:m, :n] = a
    t[:m, n : n + m] = np.eye(m)
    t[:m, -1] = b
    t[-1, :n] = -a.sum(axis=0)
    t[-1, -1] = -b.sum()
    basis = np.arange(n, n + m)
    allowed = np.ones(n + m, dtype=bool)
    _, it1 = _run(t, basis, allowed, max_iter)
    if -t[-1, -1] > FEAS_TOL * max(1.0, np.abs(b).max(initial=0.0)):
        return LpSolution("infeasible", None, float("nan"), it1)
    # drive artificials out of the basis, dropping redundant rows
    keep = np.ones(m, dtype=bool)
    for r in range(m):
        if basis[r] >= n:
            nz = np.flatnonzero(np.abs(t[r, :n]) > PIVOT_TOL)
            if nz.size:
                _pivot(t, basis, r, nz[0])
            else:
                keep[r] = False
    rows = np.r_[np.flatnonzero(keep), m]
    t = np.hstack([t[rows][:, :n], t[rows][:, -1:]])
    basis = basis[keep]
    # phase two
    t[-1, :] = 0.0
    t[-1, :n] = c
    for r, j in enumerate(basis):
        t[-1] -= c[j] * t[r]
    status, it2 = _run(t, basis, np.ones(n, dtype=bool), max_iter)
    if status == "unbounded":
        return LpSolution("unbounded", None, float("-inf"), it1 + it2)
    z = np.zeros(n)
    z[basis] = t[:-1, -1]
    x = shift + m_map @ z[:k]
    return LpSolution("optimal", x, float(problem.objective @ x + problem.offset), it1 + it2)
