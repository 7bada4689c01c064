import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from margops.envs import ChainSpec, build_chain
from margops.mdp import (
    MdpError,
    Policy,
    TabularMdp,
    balance_residual,
    bellman_error_vector,
    discounted_visitation,
    exact_q,
    exact_v,
    joint_transition_matrix,
    random_mdp,
    random_policy,
    sample_batch,
    sample_trajectory,
)
from margops.operators import importance_ratios

from .conftest import absorbing_mdp, cycle_mdp, mc_returns, random_instance, within_stderr


class TestConstruction:
    def test_rejects_non_stochastic_rows(self):
        p = np.full((2, 1, 2), 0.6)
        with pytest.raises(MdpError):
            TabularMdp(p, np.zeros((2, 1)), 0.9)

    def test_rejects_discount_one(self):
        with pytest.raises(MdpError):
            TabularMdp(np.ones((1, 1, 1)), np.zeros((1, 1)), 1.0)

    def test_rejects_negative_noise(self):
        with pytest.raises(MdpError):
            TabularMdp(np.ones((1, 1, 1)), np.zeros((1, 1)), 0.5, -np.ones((1, 1)))

    def test_terminal_must_self_loop_without_reward(self):
        p = np.zeros((2, 1, 2))
        p[0, 0, 1] = p[1, 0, 1] = 1.0
        TabularMdp(p, np.zeros((2, 1)), 0.9, terminal_states={1})
        with pytest.raises(MdpError):
            TabularMdp(p, np.array([[0.0], [1.0]]), 0.9, terminal_states={1})
        with pytest.raises(MdpError):
            TabularMdp(p, np.zeros((2, 1)), 0.9, terminal_states={0})

    def test_policy_rows_must_sum_to_one(self):
        with pytest.raises(MdpError):
            Policy(np.array([[0.5, 0.4]]))
        with pytest.raises(MdpError):
            Policy(np.array([[1.5, -0.5]]))

    def test_arrays_are_read_only(self):
        mdp = absorbing_mdp()
        with pytest.raises(ValueError):
            mdp.transition[0, 0, 0] = 0.5

    def test_pair_flattening(self):
        mdp = random_mdp(4, 3, 0.9, seed=0)
        assert mdp.pair(2, 1) == 7
        assert mdp.unpair(7) == (2, 1)
        with pytest.raises(MdpError):
            mdp.pair(4, 0)


class TestJointTransition:
    def test_cycle_is_permutation(self):
        np.testing.assert_array_equal(
            joint_transition_matrix(cycle_mdp(), Policy.uniform(2, 1)), [[0.0, 1.0], [1.0, 0.0]]
        )

    def test_zero_trace_gives_zero_matrix(self):
        mdp, pi, _ = random_instance(0)
        assert not joint_transition_matrix(mdp, pi, np.zeros(mdp.n_pairs)).any()

    def test_rows_sum_to_one(self):
        mdp = random_mdp(4, 3, 0.9, seed=3)
        p = joint_transition_matrix(mdp, Policy.uniform(4, 3))
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)

    def test_traces_make_rows_substochastic(self):
        mdp, pi, mu = random_instance(1)
        c = np.minimum(1.0, importance_ratios(pi, mu))
        assert np.all(joint_transition_matrix(mdp, mu, c).sum(axis=1) <= 1.0 + 1e-12)

    def test_ratio_traces_recover_target_matrix(self):
        mdp, pi, mu = random_instance(2)
        np.testing.assert_array_almost_equal(
            joint_transition_matrix(mdp, mu, importance_ratios(pi, mu)),
            joint_transition_matrix(mdp, pi),
            decimal=14,
        )

    def test_negative_trace_rejected(self):
        mdp, pi, _ = random_instance(0)
        c = np.ones(mdp.n_pairs)
        c[4] = -0.1
        with pytest.raises(MdpError, match=r"\(1, 1\)"):
            joint_transition_matrix(mdp, pi, c)

    def test_dimension_mismatch(self):
        mdp = random_mdp(4, 3, 0.9, seed=0)
        with pytest.raises(MdpError):
            joint_transition_matrix(mdp, Policy.uniform(3, 3))
        with pytest.raises(MdpError):
            joint_transition_matrix(mdp, Policy.uniform(4, 3), np.ones(5))


class TestExactQ:
    def test_absorbing_state_geometric_series(self):
        assert exact_q(absorbing_mdp(1.0, 0.9), Policy.uniform(1, 1))[0] == pytest.approx(10.0, abs=1e-12)

    def test_zero_rewards(self):
        mdp = random_mdp(5, 2, 0.9, seed=1)
        zero = TabularMdp(mdp.transition, np.zeros((5, 2)), 0.9)
        assert not exact_q(zero, Policy.uniform(5, 2)).any()

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_bellman_fixed_point(self, seed):
        mdp, pi, _ = random_instance(seed, n_states=4, n_actions=2)
        assert np.abs(bellman_error_vector(mdp, pi, exact_q(mdp, pi))).max() < 1e-10

    def test_independent_of_noise(self):
        mdp = random_mdp(4, 2, 0.9, seed=5)
        noisy = random_mdp(4, 2, 0.9, seed=5, noise_std=3.0)
        pi = Policy.uniform(4, 2)
        np.testing.assert_allclose(exact_q(mdp, pi), exact_q(noisy, pi), atol=1e-14)

    def test_chain_start_value_matches_monte_carlo(self, chain):
        mdp, pi, _ = chain
        returns = mc_returns(mdp, pi, (0, 0), 100_000, seed=11)
        stderr = returns.std(ddof=1) / np.sqrt(returns.size)
        q = exact_q(mdp, pi)[0]
        assert q == pytest.approx(0.95**9, abs=1e-12)
        assert within_stderr(returns.mean(), stderr, q)

    def test_random_mdp_matches_monte_carlo(self):
        mdp = random_mdp(6, 2, 0.7, seed=8, noise_std=0.5)
        pi = random_policy(6, 2, seed=9)
        q = exact_q(mdp, pi)
        for start in [(0, 0), (3, 1)]:
            returns = mc_returns(mdp, pi, start, 100_000, seed=start[0])
            stderr = returns.std(ddof=1) / np.sqrt(returns.size)
            assert within_stderr(returns.mean(), stderr, q[mdp.pair(*start)])

    def test_exact_v_is_policy_average(self):
        mdp, pi, _ = random_instance(4)
        q = exact_q(mdp, pi).reshape(mdp.n_states, mdp.n_actions)
        np.testing.assert_allclose(exact_v(mdp, pi), (pi.probs * q).sum(axis=1))


class TestVisitation:
    def test_absorbing_state_point_mass(self):
        np.testing.assert_allclose(discounted_visitation(absorbing_mdp(), Policy.uniform(1, 1), (0, 0)), [1.0])

    def test_cycle_alternating_sum(self):
        d = discounted_visitation(cycle_mdp(0.8), Policy.uniform(2, 1), (1, 0))
        # the start keeps (1 - g) / (1 - g^2) = 5/9 of the mass
        assert d[1] == pytest.approx((1 - 0.8) / (1 - 0.8**2), abs=1e-14)
        assert d[1] == pytest.approx(5 / 9, abs=1e-14)
        assert d[0] == pytest.approx(4 / 9, abs=1e-14)

    @given(st.integers(0, 10_000))
    @settings(max_examples=30, deadline=None)
    def test_probability_vector_satisfying_balance(self, seed):
        mdp, _, mu = random_instance(seed, n_states=4, n_actions=3)
        for i in range(mdp.n_pairs):
            start = mdp.unpair(i)
            d = discounted_visitation(mdp, mu, start)
            assert d.min() >= -1e-14
            assert d.sum() == pytest.approx(1.0, abs=1e-10)
            assert np.abs(balance_residual(mdp, mu, d, start)).sum() < 1e-10

    def test_invalid_start(self):
        mdp, _, mu = random_instance(0)
        with pytest.raises(MdpError):
            discounted_visitation(mdp, mu, (9, 0))

    def test_chain_matches_empirical_occupancy(self, chain):
        mdp, _, mu = chain
        g = mdp.discount
        batch = sample_batch(mdp, mu, (0, 0), 100_000, 20, seed=4, trim=True)
        pairs = batch.pairs(mdp.n_actions)
        disc = (1 - g) * g ** np.arange(pairs.shape[1])
        live = ~batch.done
        contrib = np.zeros((pairs.shape[0], mdp.n_pairs))
        rows = np.repeat(np.arange(pairs.shape[0]), pairs.shape[1]).reshape(pairs.shape)
        np.add.at(contrib, (rows[live], pairs[live]), np.broadcast_to(disc, pairs.shape)[live])
        mean = contrib.mean(axis=0)
        stderr = contrib.std(axis=0, ddof=1) / np.sqrt(contrib.shape[0])
        d = discounted_visitation(mdp, mu, (0, 0))
        nonterminal = ~mdp.terminal_mask()
        assert np.all(within_stderr(mean[nonterminal], stderr[nonterminal], d[nonterminal]))


class TestBellmanError:
    def test_zero_q_gives_rewards(self):
        mdp, pi, _ = random_instance(3)
        np.testing.assert_array_equal(bellman_error_vector(mdp, pi, np.zeros(mdp.n_pairs)), mdp.rewards)

    def test_matches_explicit_summation(self):
        mdp, pi, _ = random_instance(5)
        q = np.random.default_rng(0).normal(size=mdp.n_pairs)
        expected = np.empty(mdp.n_pairs)
        for x in range(mdp.n_states):
            for a in range(mdp.n_actions):
                nxt = 0.0
                for y in range(mdp.n_states):
                    for b in range(mdp.n_actions):
                        nxt += mdp.transition[x, a, y] * pi.probs[y, b] * q[y * mdp.n_actions + b]
                expected[x * mdp.n_actions + a] = mdp.mean_reward[x, a] + mdp.discount * nxt - q[x * mdp.n_actions + a]
        np.testing.assert_allclose(bellman_error_vector(mdp, pi, q), expected, atol=1e-13)

    def test_length_checked(self):
        mdp, pi, _ = random_instance(3)
        with pytest.raises(MdpError):
            bellman_error_vector(mdp, pi, np.zeros(3))


class TestSampling:
    def test_chain_visits_states_in_order(self):
        mdp, _, mu = build_chain(ChainSpec())
        for seed in range(5):
            traj = sample_trajectory(mdp, mu, (0, None), 50, seed)
            np.testing.assert_array_equal(traj.states, np.arange(11))
            assert traj.terminated

    def test_noiseless_rewards_are_means(self):
        mdp, _, mu = build_chain(ChainSpec(noise_std=0.0))
        traj = sample_trajectory(mdp, mu, (0, None), 50, 3)
        pairs = traj.pairs(mdp.n_actions)
        np.testing.assert_array_equal(traj.rewards, mdp.rewards[pairs])

    def test_same_seed_same_trajectory(self):
        mdp, _, mu = random_instance(2)
        a = sample_trajectory(mdp, mu, (1, 2), 40, 123)
        b = sample_trajectory(mdp, mu, (1, 2), 40, 123)
        np.testing.assert_array_equal(a.states, b.states)
        np.testing.assert_array_equal(a.actions, b.actions)
        np.testing.assert_array_equal(a.rewards, b.rewards)
        assert a.start == (1, 2)
        assert len(a) == 40 and not a.terminated

    def test_transitions_respect_support(self):
        mdp, _, mu = random_instance(6, branching=2)
        traj = sample_trajectory(mdp, mu, (0, 0), 200, 1)
        for x, a, y in zip(traj.states[:-1], traj.actions, traj.states[1:]):
            assert mdp.transition[x, a, y] > 0

    def test_max_steps_validated(self):
        mdp, _, mu = random_instance(0)
        with pytest.raises(MdpError):
            sample_trajectory(mdp, mu, (0, 0), 0, 0)

    def test_batch_trim_stops_after_absorption(self, chain):
        mdp, _, mu = chain
        batch = sample_batch(mdp, mu, (0, None), 32, 500, seed=0, trim=True)
        assert batch.actions.shape == (32, 10)
        assert np.all(batch.states[:, -1] == 10)
