import numpy as np
import pytest

from margops.envs import ChainSpec, build_chain
from margops.estimation import truncation_horizon
from margops.mdp import Policy, TabularMdp, random_mdp, random_policy, sample_batch


def cycle_mdp(discount=0.8):
    """Two states, one action, deterministic swap."""
    p = np.zeros((2, 1, 2))
    p[0, 0, 1] = p[1, 0, 0] = 1.0
    return TabularMdp(p, np.zeros((2, 1)), discount)


def absorbing_mdp(reward=1.0, discount=0.9):
    p = np.ones((1, 1, 1))
    return TabularMdp(p, np.full((1, 1), reward), discount)


def random_instance(seed, n_states=5, n_actions=3, discount=0.9, **kw):
    """Random MDP with a target and a fully supported behaviour policy."""
    mdp = random_mdp(n_states, n_actions, discount, seed=seed, **kw)
    target = random_policy(n_states, n_actions, seed=seed + 1000)
    behavior = random_policy(n_states, n_actions, seed=seed + 2000, min_prob=0.05)
    return mdp, target, behavior


def mc_returns(mdp, policy, start, n, seed, chunk=20_000, tol=1e-10):
    """Discounted returns of ``n`` rollouts from ``start``, simulated in chunks."""
    rng = np.random.default_rng(seed)
    horizon = truncation_horizon(mdp.discount, tol)
    out = []
    while sum(len(o) for o in out) < n:
        m = min(chunk, n - sum(len(o) for o in out))
        batch = sample_batch(mdp, policy, start, m, horizon, rng, trim=True)
        disc = mdp.discount ** np.arange(batch.rewards.shape[1])
        out.append(batch.rewards @ disc)
    return np.concatenate(out)


@pytest.fixture
def chain():
    return build_chain(ChainSpec())


@pytest.fixture
def small_instance():
    return random_instance(7)


def within_stderr(estimate, stderr, exact, k=3.0, floor=1e-12):
    return np.abs(np.asarray(estimate) - exact) <= k * np.asarray(stderr) + floor


def sparse_weight_chain(designated_action=0):
    """Five-state deterministic chain with 2 actions, uniform policies and gamma 0.8.

    The weight row at ``(0, 0)`` is ``d / d^mu`` for ``d`` with mass 0.2 at
    the start and 0.01 at ``(2, designated_action)``.
    """
    n = 5
    p = np.zeros((n, 2, n))
    for x in range(n - 1):
        p[x, :, x + 1] = 1.0
    p[n - 1, :, n - 1] = 1.0
    mdp = TabularMdp(p, np.zeros((n, 2)), 0.8, terminal_states={n - 1})
    pi = Policy.uniform(n, 2)
    d = np.zeros(mdp.n_pairs)
    d[mdp.pair(0, 0)] = 0.2
    d[mdp.pair(2, designated_action)] = 0.01
    return mdp, pi, d
