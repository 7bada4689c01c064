"""Saddle-point losses whose solutions are TD weights.

The weight row is optimised through its weighted visitation
``d_w = w * d^mu``; the loss is linear in both the critic ``q`` and ``d_w``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .estimation import truncation_horizon
from .mdp import (
    MdpError,
    Policy,
    TabularMdp,
    _as_rng,
    _check_pair_vector,
    discounted_visitation,
    joint_transition_matrix,
    sample_batch,
)
from .operators import (
    RADIUS_THRESHOLD,
    ZERO_VISITATION,
    SeriesDivergenceError,
    importance_ratios,
    spectral_radius_estimate,
)

DIVERGENCE_LOSS = 1e3


class SaddleDivergenceError(ArithmeticError):
    pass


@dataclass
class SaddleState:
    w: np.ndarray
    q: np.ndarray
    step: int
    loss: float


def _sub_policy_matrix(mdp: TabularMdp, behavior: Policy, c) -> np.ndarray:
    """Pair transition matrix of the sub-policy ``mu * c``."""
    c = _check_pair_vector(mdp, c, "trace")
    return joint_transition_matrix(mdp, behavior, c)


def _delta(mdp: TabularMdp, start) -> np.ndarray:
    e = np.zeros(mdp.n_pairs)
    e[mdp.pair(*start)] = 1.0
    return e


def saddle_residual(mdp: TabularMdp, behavior: Policy, c, w_row, start, *, p_tilde=None, d_mu=None) -> np.ndarray:
    """``(1-gamma) delta + gamma P~^T d_w - d_w`` with ``d_w = w_row * d^mu``."""
    w_row = _check_pair_vector(mdp, w_row, "w row")
    p_tilde = _sub_policy_matrix(mdp, behavior, c) if p_tilde is None else p_tilde
    d_mu = discounted_visitation(mdp, behavior, start) if d_mu is None else d_mu
    d_w = w_row * d_mu
    return (1.0 - mdp.discount) * _delta(mdp, start) + mdp.discount * p_tilde.T @ d_w - d_w


def saddle_loss(mdp: TabularMdp, behavior: Policy, c, w_row, q, start) -> float:
    """Critic score ``q . residual``; zero for every critic at the TD weights of ``c``."""
    q = _check_pair_vector(mdp, q, "critic")
    return float(q @ saddle_residual(mdp, behavior, c, w_row, start))


def max_qb_loss(mdp: TabularMdp, behavior: Policy, c, w_row, start) -> float:
    """Loss maximised over critics in the box ``[-1, 1]``, attained at the residual's sign."""
    return float(np.abs(saddle_residual(mdp, behavior, c, w_row, start)).sum())


def contraction_bound_via_Qb(mdp: TabularMdp, target: Policy, behavior: Policy, w_row, start, c=None) -> float:
    """Box-critic loss divided by ``1 - gamma``.

    With the default traces ``c = pi / mu`` this is the local contraction
    rate of the marginalized operator with weights ``w_row``.
    """
    if c is None:
        c = importance_ratios(target, behavior)
    return max_qb_loss(mdp, behavior, c, w_row, start) / (1.0 - mdp.discount)


def qT_scoring(mdp: TabularMdp, behavior: Policy, c, probe) -> np.ndarray:
    """Critic ``sum_t gamma^t (P~^t)[:, probe]`` isolating one weight entry.

    For any row ``w``, ``saddle_loss(q) = -(w - w^c)(probe) * d^mu(probe)``.
    """
    p_tilde = _sub_policy_matrix(mdp, behavior, c)
    scaled = mdp.discount * p_tilde
    if np.max(scaled.sum(axis=1)) >= 1.0 and spectral_radius_estimate(scaled) >= RADIUS_THRESHOLD:
        raise SeriesDivergenceError("scoring series does not converge for these traces")
    e = np.zeros(mdp.n_pairs)
    e[mdp.pair(*probe)] = 1.0
    return np.linalg.solve(np.eye(mdp.n_pairs) - scaled, e)


def _empirical_model(mdp: TabularMdp, behavior: Policy, start, n_trajectories: int, seed):
    """Plug-in transition tensor and start visitation from replayed rollouts."""
    rng = _as_rng(seed)
    counts = np.zeros((mdp.n_pairs, mdp.n_states))
    d_hat = np.zeros(mdp.n_pairs)
    g = mdp.discount
    for pairs in _rollouts_from_pair(mdp, behavior, start, n_trajectories, rng):
        np.add.at(d_hat, pairs, (1.0 - g) * g ** np.arange(pairs.size))
        nxt = pairs[1:] // mdp.n_actions
        np.add.at(counts, (pairs[:-1], nxt), 1.0)
    d_hat /= n_trajectories
    seen = counts.sum(axis=1)
    p_hat = np.zeros((mdp.n_pairs, mdp.n_states))
    p_hat[seen > 0] = counts[seen > 0] / seen[seen > 0, None]
    # unseen pairs keep their own state so the tensor stays stochastic
    states = np.arange(mdp.n_pairs) // mdp.n_actions
    p_hat[seen == 0, states[seen == 0]] = 1.0
    return p_hat.reshape(mdp.n_states, mdp.n_actions, mdp.n_states), d_hat


def _rollouts_from_pair(mdp: TabularMdp, behavior: Policy, start, n: int, rng):
    steps = truncation_horizon(mdp.discount)
    batch = sample_batch(mdp, behavior, start, n, steps, rng)
    pairs = batch.pairs(mdp.n_actions)
    for i in range(n):
        yield pairs[i]


def gda_estimate_weights(
    mdp: TabularMdp,
    behavior: Policy,
    c,
    start,
    lr_w: float = 0.5,
    lr_q: float = 0.5,
    n_steps: int = 10_000,
    *,
    w0=None,
    sampled: bool = False,
    n_trajectories: int = 1000,
    seed=None,
) -> SaddleState:
    """Alternating descent on the weighted visitation, projected ascent on the critic.

    The critic lives in the box ``[-1, 1]``. Because the game is bilinear the
    raw iterates orbit the solution; the returned weights are the running
    average of the visitation iterates and ``loss`` is the box-critic loss
    of that average. With ``sampled=True`` the exact dynamics and visitation
    are replaced by a plug-in model fitted to replayed behaviour rollouts.
    """
    if lr_w <= 0 or lr_q <= 0:
        raise ValueError("learning rates must be positive")
    c = _check_pair_vector(mdp, c, "trace")
    if sampled:
        p_model, d_mu = _empirical_model(mdp, behavior, start, n_trajectories, seed)
        model = TabularMdp(p_model, np.zeros((mdp.n_states, mdp.n_actions)), mdp.discount)
        p_tilde = joint_transition_matrix(model, behavior, c)
    else:
        p_tilde = _sub_policy_matrix(mdp, behavior, c)
        d_mu = discounted_visitation(mdp, behavior, start)
    g = mdp.discount
    support = d_mu > ZERO_VISITATION
    base = (1.0 - g) * _delta(mdp, start)
    a_t = g * p_tilde.T - np.eye(mdp.n_pairs)
    d = np.zeros(mdp.n_pairs) if w0 is None else _check_pair_vector(mdp, w0, "w0") * d_mu
    q = np.zeros(mdp.n_pairs)
    d_sum = np.zeros(mdp.n_pairs)
    for step in range(1, n_steps + 1):
        q = np.clip(q + lr_q * (base + a_t @ d), -1.0, 1.0)
        d = d - lr_w * (a_t.T @ q)
        d[~support] = 0.0
        d_sum += d
        if step % 100 == 0:
            loss = float(np.abs(base + a_t @ d).sum())
            if not np.isfinite(loss) or loss > DIVERGENCE_LOSS:
                raise SaddleDivergenceError(
                    f"loss {loss:.3g} at step {step}; try smaller learning rates"
                )
    d_avg = d_sum / max(n_steps, 1) if n_steps else d
    w = np.divide(d_avg, d_mu, out=np.zeros_like(d_avg), where=support)
    loss = float(np.abs(base + a_t @ d_avg).sum())
    return SaddleState(w, q, n_steps, loss)


# ---------------------------------------------------------------------------
# Fenchel-dual formulation


def _check_sub_stochastic(mdp: TabularMdp, behavior: Policy, c) -> np.ndarray:
    c = _check_pair_vector(mdp, c, "trace")
    mass = (behavior.probs * c.reshape(behavior.probs.shape)).sum(axis=1)
    if np.any(mass > 1.0 + 1e-12):
        raise MdpError(f"mu * c is not sub-stochastic at state {int(np.argmax(mass))}")
    return c


def fenchel_dual_objective(mdp: TabularMdp, behavior: Policy, c, start, v, psi) -> float:
    """Expected ``(v - gamma v') psi - psi^2 / 2`` under ``d^mu``, minus ``(1-gamma) v(start)``."""
    c = _check_sub_stochastic(mdp, behavior, c)
    v = _check_pair_vector(mdp, v, "v")
    psi = _check_pair_vector(mdp, psi, "psi")
    p_tilde = joint_transition_matrix(mdp, behavior, c)
    d_mu = discounted_visitation(mdp, behavior, start)
    u = v - mdp.discount * p_tilde @ v
    return float(d_mu @ (u * psi - 0.5 * psi**2) - (1.0 - mdp.discount) * v[mdp.pair(*start)])


def fenchel_dual_gradients(mdp: TabularMdp, behavior: Policy, c, start, v, psi) -> tuple[np.ndarray, np.ndarray]:
    """Exact ``(dJ/dv, dJ/dpsi)``."""
    c = _check_sub_stochastic(mdp, behavior, c)
    v = _check_pair_vector(mdp, v, "v")
    psi = _check_pair_vector(mdp, psi, "psi")
    p_tilde = joint_transition_matrix(mdp, behavior, c)
    d_mu = discounted_visitation(mdp, behavior, start)
    m = np.eye(mdp.n_pairs) - mdp.discount * p_tilde
    grad_v = m.T @ (d_mu * psi) - (1.0 - mdp.discount) * _delta(mdp, start)
    grad_psi = d_mu * (m @ v - psi)
    return grad_v, grad_psi


def fenchel_gda(
    mdp: TabularMdp,
    behavior: Policy,
    c,
    start,
    lr: float = 0.5,
    n_steps: int = 100_000,
    *,
    tol: float = 0.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Descent in ``v`` and ascent in ``psi`` from zero using exact gradients.

    Stops early once both gradients fall below ``tol`` in max norm.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    c = _check_sub_stochastic(mdp, behavior, c)
    p_tilde = joint_transition_matrix(mdp, behavior, c)
    d_mu = discounted_visitation(mdp, behavior, start)
    m = np.eye(mdp.n_pairs) - mdp.discount * p_tilde
    e = (1.0 - mdp.discount) * _delta(mdp, start)
    v = np.zeros(mdp.n_pairs)
    psi = np.zeros(mdp.n_pairs)
    # blow-up is reported below as SaddleDivergenceError, not as a float warning
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(n_steps):
            psi = psi + lr * d_mu * (m @ v - psi)
            grad_v = m.T @ (d_mu * psi) - e
            v = v - lr * grad_v
            if tol and np.abs(grad_v).max() < tol and np.abs(d_mu * (m @ v - psi)).max() < tol:
                break
            if not np.all(np.isfinite(v)):
                raise SaddleDivergenceError("dual iterates diverged; try a smaller learning rate")
    return v, psi
