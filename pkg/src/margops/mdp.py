"""Finite MDP primitives.

State-action pairs are flattened as ``x * n_actions + a`` everywhere in the
package; every square matrix over pairs uses that order.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

ROW_TOL = 1e-12


class MdpError(ValueError):
    """Raised for malformed MDPs, policies or mismatched dimensions."""


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass(frozen=True, eq=False)
class TabularMdp:
    transition: np.ndarray  # (S, A, S)
    mean_reward: np.ndarray  # (S, A)
    discount: float
    reward_noise_std: np.ndarray | None = None
    terminal_states: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        p = np.array(self.transition, dtype=float)
        r = np.array(self.mean_reward, dtype=float)
        if p.ndim != 3 or p.shape[0] != p.shape[2]:
            raise MdpError(f"transition must have shape (S, A, S), got {p.shape}")
        if r.shape != p.shape[:2]:
            raise MdpError(f"mean_reward shape {r.shape} does not match {p.shape[:2]}")
        if np.any(p < 0) or np.any(np.abs(p.sum(axis=2) - 1.0) > ROW_TOL):
            raise MdpError("transition rows must be probability vectors")
        if not 0.0 <= self.discount < 1.0:
            raise MdpError(f"discount must lie in [0, 1), got {self.discount}")
        sigma = np.zeros_like(r) if self.reward_noise_std is None else np.array(
            self.reward_noise_std, dtype=float
        )
        if sigma.shape != r.shape or np.any(sigma < 0):
            raise MdpError("reward_noise_std must be a nonnegative (S, A) matrix")
        terminals = frozenset(int(x) for x in self.terminal_states)
        for x in terminals:
            if not 0 <= x < p.shape[0]:
                raise MdpError(f"terminal state {x} out of range")
            if np.any(np.abs(p[x, :, x] - 1.0) > ROW_TOL) or np.any(r[x] != 0.0):
                raise MdpError(f"terminal state {x} must self-loop with zero reward")
        for arr in (p, r, sigma):
            arr.setflags(write=False)
        object.__setattr__(self, "transition", p)
        object.__setattr__(self, "mean_reward", r)
        object.__setattr__(self, "reward_noise_std", sigma)
        object.__setattr__(self, "terminal_states", terminals)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def n_pairs(self) -> int:
        return self.n_states * self.n_actions

    @property
    def rewards(self) -> np.ndarray:
        """Mean rewards flattened over state-action pairs."""
        return self.mean_reward.reshape(-1)

    def pair(self, x: int, a: int) -> int:
        if not (0 <= x < self.n_states and 0 <= a < self.n_actions):
            raise MdpError(f"invalid state-action pair ({x}, {a})")
        return x * self.n_actions + a

    def unpair(self, i: int) -> tuple[int, int]:
        return divmod(int(i), self.n_actions)

    def terminal_mask(self) -> np.ndarray:
        """Boolean mask over flattened pairs that belong to terminal states."""
        mask = np.zeros(self.n_states, dtype=bool)
        mask[list(self.terminal_states)] = True
        return np.repeat(mask, self.n_actions)


@dataclass(frozen=True, eq=False)
class Policy:
    probs: np.ndarray  # (S, A)

    def __post_init__(self):
        pi = np.array(self.probs, dtype=float)
        if pi.ndim != 2:
            raise MdpError("policy table must be (S, A)")
        if np.any(pi < 0) or np.any(np.abs(pi.sum(axis=1) - 1.0) > ROW_TOL):
            raise MdpError("policy rows must be probability vectors")
        pi.setflags(write=False)
        object.__setattr__(self, "probs", pi)

    @classmethod
    def uniform(cls, n_states: int, n_actions: int) -> "Policy":
        return cls(np.full((n_states, n_actions), 1.0 / n_actions))

    @classmethod
    def deterministic(cls, actions, n_actions: int) -> "Policy":
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros((actions.size, n_actions))
        probs[np.arange(actions.size), actions] = 1.0
        return cls(probs)

    def mix(self, other: "Policy", weight: float) -> "Policy":
        """Return ``weight * self + (1 - weight) * other``."""
        return Policy(weight * self.probs + (1.0 - weight) * other.probs)

    @property
    def flat(self) -> np.ndarray:
        return self.probs.reshape(-1)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """A behaviour rollout.

    ``states`` has one more entry than ``actions``: the last element is the
    state reached after the final recorded step (terminal when
    ``terminated``).
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    terminated: bool

    def __post_init__(self):
        if len(self.actions) < 1 or len(self.states) != len(self.actions) + 1:
            raise MdpError("trajectory needs at least one step and a final state")
        if len(self.rewards) != len(self.actions):
            raise MdpError("one reward per step is required")

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def start(self) -> tuple[int, int]:
        return int(self.states[0]), int(self.actions[0])

    @property
    def steps(self) -> list[tuple[int, int, float]]:
        return list(zip(self.states[:-1].tolist(), self.actions.tolist(), self.rewards.tolist()))

    def pairs(self, n_actions: int) -> np.ndarray:
        return self.states[:-1] * n_actions + self.actions


def _check_policy(mdp: TabularMdp, policy: Policy) -> None:
    if policy.probs.shape != (mdp.n_states, mdp.n_actions):
        raise MdpError(
            f"policy shape {policy.probs.shape} does not match MDP "
            f"({mdp.n_states}, {mdp.n_actions})"
        )


def _check_pair_vector(mdp: TabularMdp, vec, name: str) -> np.ndarray:
    vec = np.asarray(vec, dtype=float).reshape(-1)
    if vec.shape != (mdp.n_pairs,):
        raise MdpError(f"{name} must have length {mdp.n_pairs}, got {vec.shape[0]}")
    return vec


def joint_transition_matrix(mdp: TabularMdp, policy: Policy, trace=None) -> np.ndarray:
    """Pair-to-pair matrix with entries ``p(x'|x,a) policy(a'|x') c(x',a')``.

    With ``trace`` omitted this is P^pi (row-stochastic); with traces it is
    the sub-stochastic P^{c pi}.
    """
    _check_policy(mdp, policy)
    weights = policy.probs
    if trace is not None:
        c = _check_pair_vector(mdp, trace, "trace").reshape(mdp.n_states, mdp.n_actions)
        if np.any(c < 0):
            bad = mdp.unpair(int(np.argmin(c)))
            raise MdpError(f"negative trace coefficient at {bad}")
        weights = weights * c
    mat = np.einsum("xay,yb->xayb", mdp.transition, weights)
    return mat.reshape(mdp.n_pairs, mdp.n_pairs)


def state_transition_matrix(mdp: TabularMdp, policy: Policy, trace=None) -> np.ndarray:
    """State-to-state matrix ``sum_a policy(a|x) c(x,a) p(x'|x,a)``."""
    _check_policy(mdp, policy)
    weights = policy.probs
    if trace is not None:
        weights = weights * _check_pair_vector(mdp, trace, "trace").reshape(weights.shape)
    return np.einsum("xa,xay->xy", weights, mdp.transition)


def resolvent(mat: np.ndarray, discount: float) -> np.ndarray:
    """``(I - discount * mat)^{-1}`` via dense LU."""
    n = mat.shape[0]
    lu = scipy.linalg.lu_factor(np.eye(n) - discount * mat)
    return scipy.linalg.lu_solve(lu, np.eye(n))


def exact_q(mdp: TabularMdp, target: Policy) -> np.ndarray:
    p_pi = joint_transition_matrix(mdp, target)
    return scipy.linalg.lu_solve(
        scipy.linalg.lu_factor(np.eye(mdp.n_pairs) - mdp.discount * p_pi), mdp.rewards
    )


def exact_v(mdp: TabularMdp, target: Policy) -> np.ndarray:
    q = exact_q(mdp, target).reshape(mdp.n_states, mdp.n_actions)
    return np.sum(target.probs * q, axis=1)


def visitation_matrix(mdp: TabularMdp, behavior: Policy) -> np.ndarray:
    """Row (x,a) is the discounted visitation distribution d^mu_{x,a}."""
    return (1.0 - mdp.discount) * resolvent(joint_transition_matrix(mdp, behavior), mdp.discount)


def discounted_visitation(mdp: TabularMdp, behavior: Policy, start) -> np.ndarray:
    i = mdp.pair(*start)
    p_mu = joint_transition_matrix(mdp, behavior)
    rhs = np.zeros(mdp.n_pairs)
    rhs[i] = 1.0 - mdp.discount
    # d^T (I - gamma P) = (1 - gamma) delta^T
    return scipy.linalg.solve(np.eye(mdp.n_pairs) - mdp.discount * p_mu.T, rhs)


def state_visitation_matrix(mdp: TabularMdp, behavior: Policy) -> np.ndarray:
    """Row x is the discounted state visitation distribution d^mu_x."""
    return (1.0 - mdp.discount) * resolvent(state_transition_matrix(mdp, behavior), mdp.discount)


def balance_residual(mdp: TabularMdp, policy: Policy, d, start) -> np.ndarray:
    """``(1 - gamma) delta + gamma P^T d - d`` for the policy's pair matrix."""
    d = _check_pair_vector(mdp, d, "d")
    delta = np.zeros(mdp.n_pairs)
    delta[mdp.pair(*start)] = 1.0
    p = joint_transition_matrix(mdp, policy)
    return (1.0 - mdp.discount) * delta + mdp.discount * p.T @ d - d


def bellman_error_vector(mdp: TabularMdp, target: Policy, q) -> np.ndarray:
    q = _check_pair_vector(mdp, q, "q")
    p_pi = joint_transition_matrix(mdp, target)
    return mdp.rewards + mdp.discount * p_pi @ q - q


def state_value(policy: Policy, q) -> np.ndarray:
    """``Q(x, pi(x))`` for every state."""
    q = np.asarray(q, dtype=float).reshape(policy.probs.shape)
    return np.sum(policy.probs * q, axis=1)


def _sample_categorical(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    # probs: (n, k) rows summing to 1
    u = rng.random(probs.shape[0])
    idx = (np.cumsum(probs, axis=1) < u[:, None]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


@dataclass(frozen=True, eq=False)
class TrajectoryBatch:
    """``n`` rollouts of equal length, padded with absorbing steps.

    Once a rollout enters a terminal state it keeps self-looping there, so
    fixed-length arrays remain faithful to the infinite-horizon process.
    ``done[i, t]`` marks steps taken from a terminal state.
    """

    states: np.ndarray  # (n, H + 1)
    actions: np.ndarray  # (n, H)
    rewards: np.ndarray  # (n, H)
    done: np.ndarray  # (n, H)

    def pairs(self, n_actions: int) -> np.ndarray:
        return self.states[:, :-1] * n_actions + self.actions


def sample_batch(
    mdp: TabularMdp, behavior: Policy, start, n: int, horizon: int, seed, *, trim: bool = False
) -> TrajectoryBatch:
    """Vectorised rollouts of fixed length ``horizon`` from a start pair.

    ``start`` may be a single ``(x, a)`` pair, or ``(x, None)`` to draw the
    first action from the behaviour policy. With ``trim`` the arrays end as
    soon as every rollout has been absorbed.
    """
    _check_policy(mdp, behavior)
    rng = _as_rng(seed)
    x0, a0 = start
    term = np.zeros(mdp.n_states, dtype=bool)
    term[list(mdp.terminal_states)] = True
    states = np.empty((n, horizon + 1), dtype=np.int64)
    actions = np.empty((n, horizon), dtype=np.int64)
    rewards = np.empty((n, horizon))
    states[:, 0] = x0
    cum_p = np.cumsum(mdp.transition, axis=2)
    cum_mu = np.cumsum(behavior.probs, axis=1)
    n_s, n_a = mdp.n_states, mdp.n_actions
    for t in range(horizon):
        x = states[:, t]
        if t == 0 and a0 is not None:
            a = np.full(n, a0, dtype=np.int64)
        else:
            a = np.minimum((cum_mu[x] < rng.random(n)[:, None]).sum(axis=1), n_a - 1)
        actions[:, t] = a
        noise = rng.standard_normal(n)
        rewards[:, t] = mdp.mean_reward[x, a] + mdp.reward_noise_std[x, a] * noise
        u = rng.random(n)
        states[:, t + 1] = np.minimum((cum_p[x, a] < u[:, None]).sum(axis=1), n_s - 1)
        if trim and np.all(term[states[:, t + 1]]):
            states, actions, rewards = states[:, : t + 2], actions[:, : t + 1], rewards[:, : t + 1]
            break
    done = term[states[:, :-1]]
    return TrajectoryBatch(states, actions, rewards, done)


def sample_trajectory(mdp: TabularMdp, behavior: Policy, start, max_steps: int, seed) -> Trajectory:
    """One rollout that stops on entering a terminal state or after ``max_steps``.

    Rewards are ``mean + std * N(0, 1)``. ``start=(x, None)`` draws the first
    action from the behaviour policy.
    """
    if max_steps < 1:
        raise MdpError("max_steps must be at least 1")
    _check_policy(mdp, behavior)
    rng = _as_rng(seed)
    x, a = start
    states, actions, rewards = [int(x)], [], []
    terminated = x in mdp.terminal_states
    while not terminated and len(actions) < max_steps:
        if a is None:
            a = int(_sample_categorical(rng, behavior.probs[x][None, :])[0])
        r = mdp.mean_reward[x, a] + mdp.reward_noise_std[x, a] * rng.standard_normal()
        x_next = int(_sample_categorical(rng, mdp.transition[x, a][None, :])[0])
        actions.append(int(a))
        rewards.append(float(r))
        states.append(x_next)
        x, a = x_next, None
        terminated = x in mdp.terminal_states
    if not actions:
        raise MdpError("cannot start a trajectory from a terminal state")
    return Trajectory(
        np.array(states, dtype=np.int64),
        np.array(actions, dtype=np.int64),
        np.array(rewards),
        terminated,
    )


def random_mdp(
    n_states: int,
    n_actions: int,
    discount: float,
    seed=None,
    *,
    branching: int | None = None,
    deterministic: bool = False,
    noise_std: float = 0.0,
) -> TabularMdp:
    """Random MDP with Dirichlet transitions over ``branching`` successors."""
    rng = _as_rng(seed)
    p = np.zeros((n_states, n_actions, n_states))
    k = 1 if deterministic else (branching or n_states)
    for x in range(n_states):
        for a in range(n_actions):
            succ = rng.choice(n_states, size=k, replace=False)
            p[x, a, succ] = rng.dirichlet(np.ones(k))
    r = rng.uniform(-1.0, 1.0, size=(n_states, n_actions))
    return TabularMdp(p, r, discount, np.full((n_states, n_actions), noise_std))


def random_policy(n_states: int, n_actions: int, seed=None, *, min_prob: float = 0.0) -> Policy:
    rng = _as_rng(seed)
    probs = rng.dirichlet(np.ones(n_actions), size=n_states)
    probs = min_prob + (1.0 - n_actions * min_prob) * probs
    return Policy(probs / probs.sum(axis=1, keepdims=True))
