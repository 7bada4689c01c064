"""Policy evaluation through visitation linear programs.

Variables are laid out as ``[d (n_pairs, free), u (n_pairs, >= 0)]``; the
exact program has only the ``d`` block.
"""

from __future__ import annotations

import numpy as np

from .mdp import Policy, TabularMdp, _check_pair_vector, bellman_error_vector, joint_transition_matrix
from .operators import weights_from_visitation
from .simplex import LpProblem, LpSolution, SimplexError, simplex_solve


class LpEvaluationError(RuntimeError):
    pass


def _balance(mdp: TabularMdp, target: Policy, start):
    """``(A, b)`` with ``A d - b`` equal to ``d - gamma P^T d - (1-gamma) delta``."""
    n = mdp.n_pairs
    a = np.eye(n) - mdp.discount * joint_transition_matrix(mdp, target).T
    b = np.zeros(n)
    b[mdp.pair(*start)] = 1.0 - mdp.discount
    return a, b


def build_dual_lp(mdp: TabularMdp, target: Policy, start) -> LpProblem:
    """Minimise expected reward under ``d`` subject to the balance equation.

    Its only feasible point is the target visitation from ``start``, so the
    optimum is ``Q^pi(start)``.
    """
    a, b = _balance(mdp, target, start)
    cost = mdp.rewards / (1.0 - mdp.discount)
    return LpProblem(cost, A_eq=a, b_eq=b, bounds=[(None, None)] * mdp.n_pairs)


def build_relaxed_lp(mdp: TabularMdp, target: Policy, q_t, start, eta: float) -> LpProblem:
    """Balance equation relaxed to an L1 ball of radius ``(1-gamma) eta``.

    The objective is ``Q_t(start) + d . Delta_t / (1-gamma)`` with the
    Bellman error ``Delta_t`` of ``q_t``.
    """
    if not 0.0 <= eta < 1.0:
        raise ValueError(f"eta must lie in [0, 1), got {eta}")
    q_t = _check_pair_vector(mdp, q_t, "q_t")
    n, g = mdp.n_pairs, mdp.discount
    a, b = _balance(mdp, target, start)
    slack = (1.0 - g) * np.eye(n)
    a_ub = np.vstack(
        [
            np.hstack([a, -slack]),
            np.hstack([-a, -slack]),
            np.r_[np.zeros(n), np.ones(n)][None, :],
        ]
    )
    b_ub = np.r_[b, -b, eta]
    cost = np.r_[bellman_error_vector(mdp, target, q_t) / (1.0 - g), np.zeros(n)]
    bounds = [(None, None)] * n + [(0.0, None)] * n
    return LpProblem(cost, A_ub=a_ub, b_ub=b_ub, bounds=bounds, offset=float(q_t[mdp.pair(*start)]))


def _solve_pair(problem: LpProblem, pair) -> LpSolution:
    try:
        sol = simplex_solve(problem)
    except SimplexError as exc:
        raise LpEvaluationError(f"LP for pair {pair} failed: {exc}") from exc
    if sol.status != "optimal":
        raise LpEvaluationError(f"LP for pair {pair} is {sol.status}")
    return sol


def lp_iterate(mdp: TabularMdp, target: Policy, q0, eta: float, n_iters: int) -> list[np.ndarray]:
    """Iterate ``Q_{t+1}(x,a) = optimum of the relaxed LP at (x,a)``; returns ``[Q_0, ..., Q_n]``."""
    q = _check_pair_vector(mdp, q0, "q0").copy()
    out = [q.copy()]
    for _ in range(n_iters):
        nxt = np.empty(mdp.n_pairs)
        for i in range(mdp.n_pairs):
            pair = mdp.unpair(i)
            nxt[i] = _solve_pair(build_relaxed_lp(mdp, target, q, pair, eta), pair).objective_value
        q = nxt
        out.append(q.copy())
    return out


def extract_weights_from_lp(solution: LpSolution, mdp: TabularMdp, behavior: Policy, start) -> np.ndarray:
    """TD weight row ``d* / d^mu`` from an optimal visitation LP solution."""
    if solution.status != "optimal":
        raise LpEvaluationError(f"cannot extract weights from a {solution.status} LP")
    d = np.asarray(solution.values[: mdp.n_pairs], dtype=float)
    return weights_from_visitation(mdp, behavior, d, start)
