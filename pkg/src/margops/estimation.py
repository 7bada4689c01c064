"""Sample-based estimates of the evaluation operators and of TD weights."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .mdp import (
    MdpError,
    Policy,
    TabularMdp,
    Trajectory,
    _as_rng,
    _check_pair_vector,
    sample_batch,
    state_value,
)

TAIL_TOL = 1e-12


def truncation_horizon(discount: float, tol: float = TAIL_TOL) -> int:
    """Smallest ``t`` with ``discount**t < tol``."""
    if discount == 0.0:
        return 1
    return int(math.ceil(math.log(tol) / math.log(discount))) + 1


def sample_random_time(gamma: float, seed) -> int:
    """Draw ``tau`` with ``P(tau = n) = (1 - gamma) gamma^n``."""
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    return int(_as_rng(seed).geometric(1.0 - gamma)) - 1


def sample_random_times(gamma: float, n: int, seed) -> np.ndarray:
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"gamma must lie in [0, 1), got {gamma}")
    return _as_rng(seed).geometric(1.0 - gamma, size=n) - 1


@dataclass(frozen=True)
class EstimatorSample:
    value: float
    start: tuple[int, int]
    kind: str
    operator: str


def _td_errors(mdp: TabularMdp, target: Policy, q: np.ndarray, pairs, rewards, next_states):
    v = state_value(target, q)
    return rewards + mdp.discount * v[next_states] - q[pairs]


def estimate_operator(
    trajectory: Trajectory,
    mdp: TabularMdp,
    target: Policy,
    q,
    coeffs,
    kind: str = "trajectory",
    operator: str = "multistep",
    *,
    tau: int | None = None,
    start=None,
) -> EstimatorSample:
    """One stochastic estimate of ``R^c Q`` or ``M^w Q`` at the trajectory start.

    ``coeffs`` is the trace vector ``c`` for ``operator="multistep"`` and the
    TD-weight row of the start pair for ``operator="marginalized"``. Random
    time estimates need ``tau``. A trajectory that ended in a terminal state
    contributes nothing after absorption, which is exact when ``q`` vanishes
    on terminal pairs.
    """
    if kind not in ("trajectory", "random_time"):
        raise ValueError(f"kind must be 'trajectory' or 'random_time', got {kind!r}")
    if operator not in ("multistep", "marginalized"):
        raise ValueError(f"operator must be 'multistep' or 'marginalized', got {operator!r}")
    if start is not None and tuple(start) != trajectory.start:
        raise MdpError(f"trajectory starts at {trajectory.start}, expected {tuple(start)}")
    q = _check_pair_vector(mdp, q, "q")
    coeffs = _check_pair_vector(mdp, coeffs, "coefficients")
    pairs = trajectory.pairs(mdp.n_actions)
    deltas = _td_errors(mdp, target, q, pairs, trajectory.rewards, trajectory.states[1:])
    n = len(pairs)
    if operator == "multistep":
        factors = coeffs[pairs].copy()
        factors[0] = 1.0
        weights = np.cumprod(factors)
    else:
        weights = coeffs[pairs]
    head = q[pairs[0]]
    if kind == "trajectory":
        if not trajectory.terminated and mdp.discount ** n >= TAIL_TOL:
            raise MdpError(
                f"trajectory of {n} steps is too short for truncation below {TAIL_TOL:g}"
            )
        value = head + float(np.sum(mdp.discount ** np.arange(n) * weights * deltas))
    else:
        if tau is None or tau < 0:
            raise ValueError("random-time estimates need a nonnegative tau")
        if tau >= n:
            if not trajectory.terminated:
                raise MdpError(f"tau={tau} lies beyond the {n}-step trajectory")
            value = head
        else:
            value = head + weights[tau] * deltas[tau] / (1.0 - mdp.discount)
    return EstimatorSample(float(value), trajectory.start, kind, operator)


# ---------------------------------------------------------------------------
# Streaming batch rollouts


@dataclass(frozen=True, eq=False)
class RandomTimeDraws:
    """Per-sample quantities observed at a geometric random time."""

    tau: np.ndarray
    pair: np.ndarray  # pair (x_tau, a_tau)
    trace: np.ndarray  # prod_{1 <= s <= tau} c(x_s, a_s)
    reward: np.ndarray
    next_state: np.ndarray


def _step(rng, cum, idx, size):
    u = rng.random(idx.shape[0])
    return np.minimum((cum[idx] < u[:, None]).sum(axis=1), size - 1)


def random_time_draws(mdp: TabularMdp, behavior: Policy, start, n: int, seed, c=None) -> RandomTimeDraws:
    """Roll ``n`` behaviour trajectories up to independent geometric times.

    Memory is ``O(n)``: only the running pair and trace product are kept.
    """
    rng = _as_rng(seed)
    c = np.ones(mdp.n_pairs) if c is None else _check_pair_vector(mdp, c, "trace")
    x0, a0 = start
    taus = sample_random_times(mdp.discount, n, rng)
    cum_p = np.cumsum(mdp.transition, axis=2).reshape(mdp.n_pairs, mdp.n_states)
    cum_mu = np.cumsum(behavior.probs, axis=1)
    x = np.full(n, x0, dtype=np.int64)
    a = np.full(n, a0, dtype=np.int64) if a0 is not None else _step(rng, cum_mu, x, mdp.n_actions)
    trace = np.ones(n)
    pair_out = np.empty(n, dtype=np.int64)
    reward_out = np.empty(n)
    next_out = np.empty(n, dtype=np.int64)
    active = np.arange(n)
    t = 0
    while active.size:
        pair = x[active] * mdp.n_actions + a[active]
        if t > 0:
            trace[active] *= c[pair]
        nxt = _step(rng, cum_p, pair, mdp.n_states)
        hit = taus[active] == t
        if np.any(hit):
            idx = active[hit]
            pair_out[idx] = pair[hit]
            xs, acts = np.divmod(pair[hit], mdp.n_actions)
            noise = rng.standard_normal(idx.size)
            reward_out[idx] = mdp.mean_reward[xs, acts] + mdp.reward_noise_std[xs, acts] * noise
            next_out[idx] = nxt[hit]
        keep = ~hit
        active = active[keep]
        x[active] = nxt[keep]
        a[active] = _step(rng, cum_mu, x[active], mdp.n_actions)
        t += 1
    return RandomTimeDraws(taus, pair_out, trace, reward_out, next_out)


def random_time_estimates(
    mdp: TabularMdp, target: Policy, q, start, draws: RandomTimeDraws, *, w_row=None
) -> np.ndarray:
    """Random-time estimates at ``start`` from shared draws.

    With ``w_row`` the marginalized form ``Q + w(x_tau, a_tau) Delta / (1-gamma)``
    is returned, otherwise the multi-step form using the draws' trace product.
    """
    q = _check_pair_vector(mdp, q, "q")
    delta = _td_errors(mdp, target, q, draws.pair, draws.reward, draws.next_state)
    weight = draws.trace if w_row is None else _check_pair_vector(mdp, w_row, "w row")[draws.pair]
    head = q[mdp.pair(*start)]
    return head + weight * delta / (1.0 - mdp.discount)


def trajectory_estimates(
    mdp: TabularMdp,
    behavior: Policy,
    target: Policy,
    q,
    start,
    n: int,
    seed,
    *,
    c=None,
    w_row=None,
) -> tuple[np.ndarray, np.ndarray]:
    """``n`` paired trajectory-based estimates of ``R^c Q`` and ``M^w Q``.

    Both estimators read the same rollouts; pass ``c`` and/or ``w_row``
    (a missing one yields NaNs). Rollouts are truncated once
    ``gamma^t < 1e-12``.
    """
    rng = _as_rng(seed)
    q = _check_pair_vector(mdp, q, "q")
    c = None if c is None else _check_pair_vector(mdp, c, "trace")
    w_row = None if w_row is None else _check_pair_vector(mdp, w_row, "w row")
    v = state_value(target, q)
    horizon = truncation_horizon(mdp.discount)
    cum_p = np.cumsum(mdp.transition, axis=2).reshape(mdp.n_pairs, mdp.n_states)
    cum_mu = np.cumsum(behavior.probs, axis=1)
    sigma = mdp.reward_noise_std.reshape(-1)
    x0, a0 = start
    x = np.full(n, x0, dtype=np.int64)
    a = np.full(n, a0, dtype=np.int64)
    trace = np.ones(n)
    multi = np.full(n, q[x0 * mdp.n_actions + a0])
    marg = multi.copy()
    disc = 1.0
    for t in range(horizon):
        pair = x * mdp.n_actions + a
        nxt = _step(rng, cum_p, pair, mdp.n_states)
        r = mdp.rewards[pair] + sigma[pair] * rng.standard_normal(n)
        delta = r + mdp.discount * v[nxt] - q[pair]
        if c is not None:
            if t > 0:
                trace *= c[pair]
            multi += disc * trace * delta
        if w_row is not None:
            marg += disc * w_row[pair] * delta
        disc *= mdp.discount
        x = nxt
        a = _step(rng, cum_mu, x, mdp.n_actions)
    if c is None:
        multi[:] = np.nan
    if w_row is None:
        marg[:] = np.nan
    return multi, marg


# ---------------------------------------------------------------------------
# Conditional importance sampling


@dataclass(frozen=True, eq=False)
class ConditionalEstimate:
    mean: np.ndarray
    stderr: np.ndarray
    count: np.ndarray


def conditional_is_oracle(mdp: TabularMdp, behavior: Policy, c, start, n_trajectories: int, seed) -> ConditionalEstimate:
    """Monte-Carlo conditional mean of the cumulative trace given the pair at ``tau``.

    Pairs never hit at the random time get mean 0 and infinite standard error.
    """
    if n_trajectories < 1:
        raise ValueError("need at least one trajectory")
    draws = random_time_draws(mdp, behavior, start, n_trajectories, seed, c)
    count = np.bincount(draws.pair, minlength=mdp.n_pairs).astype(float)
    total = np.bincount(draws.pair, weights=draws.trace, minlength=mdp.n_pairs)
    total_sq = np.bincount(draws.pair, weights=draws.trace**2, minlength=mdp.n_pairs)
    mean = np.divide(total, count, out=np.zeros(mdp.n_pairs), where=count > 0)
    var = np.divide(total_sq, count, out=np.zeros(mdp.n_pairs), where=count > 0) - mean**2
    var = np.maximum(var, 0.0) * np.divide(count, count - 1, out=np.zeros(mdp.n_pairs), where=count > 1)
    stderr = np.full(mdp.n_pairs, np.inf)
    seen = count > 1
    stderr[seen] = np.sqrt(var[seen] / count[seen])
    return ConditionalEstimate(mean, stderr, count.astype(np.int64))


# ---------------------------------------------------------------------------
# Tabular TD-weight estimation


def _segment_products(c_along: np.ndarray, discount: float) -> np.ndarray:
    """``G[k, j] = discount^(j-k) prod_{k<s<=j} c_s`` for ``j >= k``, else 0."""
    length = c_along.size
    zero = c_along == 0
    zeros_before = np.cumsum(zero)
    logs = np.cumsum(np.log(np.where(zero, 1.0, c_along)))
    k = np.arange(length)
    gap = k[None, :] - k[:, None]
    upper = gap >= 0
    log_prod = np.where(upper, logs[None, :] - logs[:, None], -np.inf)
    alive = zeros_before[None, :] == zeros_before[:, None]
    with np.errstate(over="ignore"):
        g = np.exp(log_prod) * discount ** np.where(upper, gap, 0)
    return np.where(upper & alive, g, 0.0)


@dataclass(eq=False)
class WeightEstimate:
    """Running tables of the tabular estimator.

    ``raw`` tracks the discounted trace occupancy ``w^c * d^mu`` and
    ``occupancy`` the same statistic with unit traces, an estimate of
    ``d^mu``. ``updates`` counts updates per start pair.
    """

    raw: np.ndarray
    occupancy: np.ndarray
    updates: np.ndarray

    def normalized(self, visitation=None) -> np.ndarray:
        """TD weights ``raw / d^mu`` using exact ``visitation`` if given."""
        den = self.occupancy if visitation is None else np.asarray(visitation, dtype=float)
        return np.divide(self.raw, den, out=np.zeros_like(self.raw), where=den > 1e-14)


def occurrence_rank(pairs: np.ndarray) -> np.ndarray:
    """``rank[k]`` = number of earlier positions holding ``pairs[k]``."""
    order = np.argsort(pairs, kind="stable")
    sorted_pairs = pairs[order]
    first = np.r_[0, np.flatnonzero(np.diff(sorted_pairs)) + 1]
    group_start = np.repeat(first, np.diff(np.r_[first, pairs.size]))
    rank = np.empty_like(pairs)
    rank[order] = np.arange(pairs.size) - group_start
    return rank


class TabularWeightEstimator:
    """Moving-average estimator of TD weights from behaviour rollouts.

    Every pair along a rollout is treated as a start pair for the remainder
    of that rollout. ``schedule="constant"`` uses the fixed step ``alpha``;
    ``schedule="mean"`` uses ``1 / n`` for the n-th update of a row, i.e. a
    running sample mean.
    """

    def __init__(self, mdp: TabularMdp, c, alpha: float = 0.1, schedule: str = "constant"):
        if not 0.0 < alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {alpha}")
        if schedule not in ("constant", "mean"):
            raise ValueError(f"schedule must be 'constant' or 'mean', got {schedule!r}")
        self.mdp = mdp
        self.c = _check_pair_vector(mdp, c, "trace")
        self.alpha = alpha
        self.schedule = schedule
        n = mdp.n_pairs
        self.estimate = WeightEstimate(np.zeros((n, n)), np.zeros((n, n)), np.zeros(n, dtype=np.int64))

    def sample_tables(self, pairs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-start ratio estimates for a rollout, traced and untraced."""
        g = self.mdp.discount
        pairs = np.asarray(pairs, dtype=np.int64)
        onehot = np.zeros((pairs.size, self.mdp.n_pairs))
        onehot[np.arange(pairs.size), pairs] = 1.0
        visits = np.cumsum(onehot[::-1], axis=0)[::-1]
        num = (1.0 - g) * _segment_products(self.c[pairs], g) @ onehot
        occ = (1.0 - g) * _segment_products(np.ones(pairs.size), g) @ onehot
        w_hat = np.divide(num, visits, out=np.zeros_like(num), where=visits > 0)
        d_hat = np.divide(occ, visits, out=np.zeros_like(occ), where=visits > 0)
        return w_hat, d_hat

    def update(self, pairs) -> None:
        """Update every start row along one rollout given as flat pairs."""
        pairs = np.asarray(pairs, dtype=np.int64)
        w_hat, d_hat = self.sample_tables(pairs)
        est = self.estimate
        distinct = np.unique(pairs).size == pairs.size
        rank = np.zeros_like(pairs) if distinct else occurrence_rank(pairs)
        # positions sharing a rank hold distinct pairs, so each batch is order-free
        for r in range(int(rank.max()) + 1):
            k = np.flatnonzero(rank == r)
            rows = pairs[k]
            est.updates[rows] += 1
            if self.schedule == "constant":
                step = np.full(k.size, self.alpha)
            else:
                step = 1.0 / est.updates[rows]
            step = step[:, None]
            est.raw[rows] = (1.0 - step) * est.raw[rows] + step * w_hat[k]
            est.occupancy[rows] = (1.0 - step) * est.occupancy[rows] + step * d_hat[k]

    def update_trajectory(self, trajectory: Trajectory) -> None:
        self.update(trajectory.pairs(self.mdp.n_actions))


def rollout_pairs(mdp: TabularMdp, behavior: Policy, start_state: int, n: int, seed, max_steps: int | None = None):
    """Yield flat pair sequences of ``n`` behaviour rollouts.

    Each rollout stops on entering a terminal state or after ``max_steps``
    (default: once ``gamma^t < 1e-12``). Rollouts are simulated in chunks.
    """
    rng = _as_rng(seed)
    steps = max_steps or truncation_horizon(mdp.discount)
    term = np.zeros(mdp.n_states, dtype=bool)
    term[list(mdp.terminal_states)] = True
    if term[start_state]:
        raise MdpError("cannot start rollouts from a terminal state")
    chunk = max(1, min(n, 2_000_000 // (steps + 1)))
    done = 0
    while done < n:
        m = min(chunk, n - done)
        batch = sample_batch(mdp, behavior, (start_state, None), m, steps, rng, trim=True)
        pairs = batch.pairs(mdp.n_actions)
        hit = term[batch.states[:, 1:]]
        lengths = np.where(hit.any(axis=1), hit.argmax(axis=1) + 1, hit.shape[1])
        for i in range(m):
            yield pairs[i, : lengths[i]]
        done += m


def tabular_weight_estimation(
    mdp: TabularMdp,
    behavior: Policy,
    c,
    n_iterations: int,
    alpha: float = 0.1,
    seed=None,
    *,
    start_state: int = 0,
    max_steps: int | None = None,
    schedule: str = "constant",
) -> WeightEstimate:
    """Run the tabular estimator on ``n_iterations`` fresh behaviour rollouts.

    Rollouts start at ``start_state`` with a behaviour-drawn first action and
    stop at absorption or once ``gamma^t < 1e-12``.
    """
    if n_iterations < 1:
        raise ValueError("n_iterations must be at least 1")
    est = TabularWeightEstimator(mdp, c, alpha, schedule)
    for pairs in rollout_pairs(mdp, behavior, start_state, n_iterations, seed, max_steps):
        est.update(pairs)
    return est.estimate
