import json
import math

import numpy as np
import pytest

from margops.envs import RIGHT
from margops.harness.config import ExperimentConfig
from margops.harness.experiments import (
    MetricSeries,
    build_environment,
    ema_update,
    export_weights,
    greedy_policy,
    relative_error,
    run_evaluation,
    run_openworld_heatmap,
    run_policy_iteration,
)
from margops.mdp import exact_q, state_value


def _cfg(**kw):
    return ExperimentConfig(**kw).validate()


def _value_iteration(mdp, tol=1e-12):
    v = np.zeros(mdp.n_states)
    while True:
        q = mdp.mean_reward + mdp.discount * mdp.transition @ v
        nxt = q.max(axis=1)
        if np.abs(nxt - v).max() < tol:
            return nxt
        v = nxt


class TestPieces:
    def test_metric_series_reduction(self):
        runs = np.array([[1.0, 2.0], [3.0, 6.0]])
        s = MetricSeries.from_runs(runs)
        np.testing.assert_allclose(s.mean, [2.0, 4.0])
        np.testing.assert_allclose(s.stderr, [1.0, 2.0])
        assert len(s) == 2 and s.n_seeds == 2

    def test_ema_applies_repeats_in_order(self):
        q = np.zeros(3)
        ema_update(q, np.array([1, 1, 2]), np.array([10.0, 20.0, 5.0]), 0.5)
        # first visit moves to 5, the second to (5 + 20) / 2
        np.testing.assert_allclose(q, [0.0, 12.5, 2.5])

    def test_relative_error_metrics(self):
        mdp, _, _, _ = build_environment(_cfg(n_actions=2, horizon=3))
        q_pi = np.zeros(mdp.n_pairs)
        q_pi[:2] = [2.0, 4.0]
        q = q_pi.copy()
        q[:2] = [1.0, 5.0]
        assert relative_error(q, q_pi, mdp, 0, "sum_relative") == pytest.approx(0.5 + 0.25)
        assert relative_error(q, q_pi, mdp, 0, "relative_norm") == pytest.approx(2.0 / 6.0)

    def test_relative_error_skips_zero_denominators(self):
        mdp, _, _, _ = build_environment(_cfg(n_actions=2, horizon=3))
        q_pi = np.zeros(mdp.n_pairs)
        q_pi[0] = 1.0
        q = np.full(mdp.n_pairs, 0.5)
        assert relative_error(q, q_pi, mdp, 0, "sum_relative") == pytest.approx(0.5)

    def test_greedy_ties_go_to_lowest_action(self):
        q = np.array([1.0, 1.0, 0.0, 0.0, 2.0, 2.0 - 1e-14])
        pol = greedy_policy(q, 2, 3)
        np.testing.assert_array_equal(pol.probs.argmax(axis=1), [0, 1])


class TestEvaluation:
    def test_exact_weights_finish_in_one_rollout(self):
        # a single action removes the behaviour mismatch, so one noiseless return is exact
        cfg = _cfg(n_actions=1, noise_std=0.0, q_step_size=1.0, n_seeds=3, n_iterations=12,
                   operators=["marginalized_exact", "one_step"])
        res = run_evaluation(cfg)
        assert res["marginalized_exact"].mean[1] < 1e-6
        # one-step backups need a rollout per chain link
        assert res["one_step"].mean[cfg.horizon - 1] > 0.5
        assert res["one_step"].mean[-1] < 1e-6

    def test_exact_weights_finish_once_every_pair_is_seen(self):
        cfg = _cfg(noise_std=0.0, q_step_size=1.0, cbar=math.inf, n_seeds=20, n_iterations=150,
                   operators=["marginalized_exact"])
        series = run_evaluation(cfg)["marginalized_exact"]
        assert series.per_seed[:, -1].max() < 1e-6

    def test_injected_target_values_have_zero_error(self):
        cfg = _cfg(q_init="exact", operators=["exact"], n_seeds=3, n_iterations=20)
        np.testing.assert_array_equal(run_evaluation(cfg)["exact"].per_seed, 0.0)

    def test_zero_init_error_is_action_count(self):
        res = run_evaluation(_cfg(operators=["one_step"], n_seeds=2, n_iterations=1))
        assert res["one_step"].mean[0] == pytest.approx(5.0)

    def test_rerun_is_byte_identical(self, tmp_path):
        cfg = _cfg(operators=["one_step", "retrace", "marginalized_estimated"], n_seeds=4, n_iterations=30)
        run_evaluation(cfg, tmp_path / "a")
        run_evaluation(cfg, tmp_path / "b")
        for name in ("eval_one_step.csv", "eval_retrace.csv", "eval_marginalized_estimated.csv", "eval_summary.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_worker_pool_matches_serial(self):
        cfg = _cfg(operators=["retrace"], n_seeds=4, n_iterations=20)
        serial = run_evaluation(cfg)["retrace"].per_seed
        pooled = run_evaluation(cfg.replace(workers=2))["retrace"].per_seed
        np.testing.assert_array_equal(serial, pooled)

    def test_csv_schema(self, tmp_path):
        run_evaluation(_cfg(operators=["one_step"], n_seeds=2, n_iterations=3), tmp_path)
        lines = (tmp_path / "eval_one_step.csv").read_text().split("\n")
        assert lines[0] == "iteration,mean_error,stderr"
        assert len(lines) == 6 and lines[-1] == ""
        summary = json.loads((tmp_path / "eval_summary.json").read_text())
        assert summary["n_seeds"] == 2

    def test_stderr_shrinks_with_more_seeds(self):
        base = _cfg(operators=["one_step"], n_seeds=300, n_iterations=40)
        small = run_evaluation(base)["one_step"].stderr[-1]
        large = run_evaluation(base.replace(n_seeds=600))["one_step"].stderr[-1]
        assert large / small == pytest.approx(1 / math.sqrt(2), rel=0.2)

    def test_estimated_weights_use_both_estimators(self):
        for est in ("alg2", "gda"):
            cfg = _cfg(operators=["marginalized_estimated"], estimator=est, n_seeds=2, n_iterations=50)
            series = run_evaluation(cfg)["marginalized_estimated"]
            assert np.all(np.isfinite(series.mean))
            assert series.mean[-1] < series.mean[0]


@pytest.fixture(scope="module")
def grids():
    cfg = _cfg(env="openworld", side=5, operators=["retrace", "marginalized_exact"], cbar=1.0,
               n_seeds=20, n_iterations=300, checkpoints=[0, 100, 300])
    mdp, pi, _, _ = build_environment(cfg)
    return run_openworld_heatmap(cfg), state_value(pi, exact_q(mdp, pi)).reshape(5, 5)


class TestHeatmap:
    def test_start_is_zero(self, grids):
        g, _ = grids
        np.testing.assert_array_equal(g["retrace"][0], 0.0)
        assert g["retrace"][0].shape == (5, 5)

    def test_capped_retrace_matches_marginalized(self, grids):
        g, _ = grids
        for k in (100, 300):
            assert np.abs(g["retrace"][k] - g["marginalized_exact"][k]).max() < 0.02

    def test_converges_to_exact_values(self, grids):
        g, v = grids
        final = g["marginalized_exact"][300]
        assert np.abs(final - v).max() < 0.05
        # values rise toward the goal along down and right moves
        for r in range(5):
            for c in range(5):
                if (r, c) in ((4, 4), (3, 4), (4, 3)):
                    continue
                if c + 1 < 5:
                    assert final[r, c + 1] >= final[r, c] - 0.05
                if r + 1 < 5:
                    assert final[r + 1, c] >= final[r, c] - 0.05

    def test_files_written(self, tmp_path):
        cfg = _cfg(env="openworld", side=3, operators=["one_step"], n_seeds=2, n_iterations=5, checkpoints=[0, 5, 99])
        run_openworld_heatmap(cfg, tmp_path)
        names = sorted(p.name for p in tmp_path.iterdir())
        assert names == ["heatmap_exact.csv", "heatmap_one_step_iter0.csv", "heatmap_one_step_iter5.csv",
                         "heatmap_summary.json"]
        assert (tmp_path / "heatmap_exact.csv").read_text().startswith("col0,col1,col2\n")


class TestPolicyIteration:
    def test_hard_exact_reaches_optimal_return(self):
        cfg = _cfg(env="openworld", side=4, operators=["exact"], n_seeds=2, pi_iterations=16, n_eval_episodes=4000)
        mdp, _, _, _ = build_environment(cfg)
        v_star = _value_iteration(mdp)
        live = np.delete(v_star, list(mdp.terminal_states))
        series = run_policy_iteration(cfg, "hard")["exact"]
        tol = 3 * live.std() / math.sqrt(cfg.n_eval_episodes)
        np.testing.assert_allclose(series.per_seed[:, -1], live.mean(), atol=tol)

    def test_soft_marginalized_beats_one_step(self):
        # a tight evaluation budget per improvement step is where full traces pay off
        cfg = _cfg(env="openworld", side=6, operators=["marginalized_exact", "one_step"], n_seeds=10,
                   pi_iterations=20, pi_eval_iterations=2, n_eval_episodes=500)
        res = run_policy_iteration(cfg, "soft")
        auc = {op: s.per_seed.mean(axis=1) for op, s in res.items()}
        gap = auc["marginalized_exact"] - auc["one_step"]
        assert gap.mean() > 3 * gap.std(ddof=1) / math.sqrt(gap.size)

    def test_outputs(self, tmp_path):
        cfg = _cfg(env="openworld", side=3, operators=["one_step"], n_seeds=2, pi_iterations=2, n_eval_episodes=20)
        res = run_policy_iteration(cfg, "hard", tmp_path)
        assert len(res["one_step"]) == 3
        assert (tmp_path / "pi_hard_one_step.csv").exists()
        assert json.loads((tmp_path / "pi_hard_summary.json").read_text())["mode"] == "hard"


class TestWeights:
    def test_unit_weights_give_unit_grid(self):
        cfg = _cfg(env="openworld", side=4)
        mdp, _, _, _ = build_environment(cfg)
        for grid in export_weights(cfg, weights=np.ones((mdp.n_pairs, mdp.n_pairs))).values():
            np.testing.assert_array_equal(grid, np.ones((4, 4)))

    def test_importance_weights_carry_unit_mass(self, tmp_path):
        export_weights(_cfg(env="openworld", side=6, cbar=math.inf), tmp_path)
        mass = json.loads((tmp_path / "weights_summary.json").read_text())["mass"]
        assert len(mass) == 4
        for value in mass.values():
            assert value == pytest.approx(1.0, abs=1e-10)

    def test_goal_adjacent_start_stays_near_goal(self):
        cfg = _cfg(env="openworld", side=6, weight_starts=[f"5:4:{RIGHT}"])
        grid = export_weights(cfg)[f"5:4:{RIGHT}"]
        assert grid[5, 4] > 0 and grid[5, 5] > 0
        grid[5, 4:] = 0.0
        np.testing.assert_array_equal(grid, 0.0)

    def test_chain_default_start(self, tmp_path):
        grids = export_weights(_cfg(n_actions=2, horizon=4), tmp_path)
        assert list(grids) == ["0:0"]
        assert grids["0:0"].shape == (1, 5)
        assert (tmp_path / "weights_0_0.csv").exists()

    @pytest.mark.parametrize(
        "env, start", [("openworld", "9:0:1"), ("openworld", "1:2"), ("chain", "0:9"), ("chain", "1:1:1")]
    )
    def test_bad_start(self, env, start):
        with pytest.raises(ValueError):
            export_weights(_cfg(env=env, side=4, weight_starts=[start]))
