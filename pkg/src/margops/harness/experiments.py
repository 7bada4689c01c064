"""Experiment loops behind the command line.

Every seed owns a generator spawned from the master seed and its own Q
table; per-seed results are reduced in seed order so output depends only on
the configuration and master seed. All operators consume the same spawned
seeds, so their rollouts coincide.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial
from pathlib import Path

import numpy as np

from ..envs import DOWN, RIGHT, build_chain, build_open_world
from ..estimation import TabularWeightEstimator, occurrence_rank, truncation_horizon
from ..mdp import (
    Policy,
    TabularMdp,
    discounted_visitation,
    exact_q,
    joint_transition_matrix,
    sample_batch,
    state_value,
    visitation_matrix,
)
from ..operators import ZERO_VISITATION, importance_ratios, trace_to_weights
from .config import ExperimentConfig

log = logging.getLogger(__name__)

ROLLOUT_CHUNK = 64
TIE_TOL = 1e-12


@dataclass
class MetricSeries:
    mean: np.ndarray
    stderr: np.ndarray
    n_seeds: int
    per_seed: np.ndarray | None = None

    @classmethod
    def from_runs(cls, runs: np.ndarray) -> "MetricSeries":
        runs = np.asarray(runs, dtype=float)
        n = runs.shape[0]
        std = runs.std(axis=0, ddof=1) if n > 1 else np.zeros(runs.shape[1])
        return cls(runs.mean(axis=0), std / math.sqrt(n), n, runs)

    def __len__(self) -> int:
        return self.mean.size


def build_environment(cfg: ExperimentConfig) -> tuple[TabularMdp, Policy, Policy, int]:
    spec = cfg.env_spec()
    if cfg.env == "chain":
        mdp, target, behavior = build_chain(spec)
    else:
        mdp, target, behavior = build_open_world(spec)
    return mdp, target, behavior, 0


def operator_traces(cfg: ExperimentConfig, operator: str, target: Policy, behavior: Policy) -> np.ndarray:
    """Step-wise traces used by ``operator``; the one-step operator cuts them all."""
    if operator == "one_step":
        return np.zeros(target.probs.size)
    return cfg.lam * np.minimum(cfg.cbar, importance_ratios(target, behavior))


def seed_sequences(cfg: ExperimentConfig) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(cfg.seed).spawn(cfg.n_seeds)


def _map(cfg: ExperimentConfig, fn, items) -> list:
    if cfg.workers == 1:
        return [fn(item) for item in items]
    with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# Rollouts and operator targets


@dataclass(frozen=True, eq=False)
class Rollout:
    pairs: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminated: bool


def rollouts(mdp: TabularMdp, behavior: Policy, start_state: int, rng, max_steps: int):
    """Endless stream of behaviour rollouts, simulated in vectorised chunks."""
    term = np.zeros(mdp.n_states, dtype=bool)
    term[list(mdp.terminal_states)] = True
    while True:
        batch = sample_batch(mdp, behavior, (start_state, None), ROLLOUT_CHUNK, max_steps, rng, trim=True)
        pairs = batch.pairs(mdp.n_actions)
        hit = term[batch.states[:, 1:]]
        ended = hit.any(axis=1)
        lengths = np.where(ended, hit.argmax(axis=1) + 1, hit.shape[1])
        for i in range(ROLLOUT_CHUNK):
            n = lengths[i]
            yield Rollout(pairs[i, :n], batch.rewards[i, :n], batch.states[i, 1 : n + 1], bool(ended[i]))


class _GdaWeights:
    """Box-critic descent-ascent run for every start row at once."""

    def __init__(self, mdp: TabularMdp, behavior: Policy, c, lr: float):
        g = mdp.discount
        self.lr = lr
        self.base = (1.0 - g) * np.eye(mdp.n_pairs)
        self.a_t = g * joint_transition_matrix(mdp, behavior, c).T - np.eye(mdp.n_pairs)
        self.d_mu = visitation_matrix(mdp, behavior)
        self.support = self.d_mu > ZERO_VISITATION
        self.d = np.zeros((mdp.n_pairs, mdp.n_pairs))
        self.q = np.zeros_like(self.d)
        self.d_sum = np.zeros_like(self.d)
        self.steps = 0

    def step(self, n: int) -> None:
        for _ in range(n):
            self.q = np.clip(self.q + self.lr * (self.base + self.d @ self.a_t.T), -1.0, 1.0)
            self.d = np.where(self.support, self.d - self.lr * self.q @ self.a_t, 0.0)
            self.d_sum += self.d
            self.steps += 1

    def weights(self) -> np.ndarray:
        avg = self.d_sum / max(self.steps, 1)
        return np.divide(avg, self.d_mu, out=np.zeros_like(avg), where=self.support)


class OperatorTargets:
    """Builds per-position targets ``Q_hat(x_t, a_t)`` along a rollout."""

    def __init__(self, cfg: ExperimentConfig, operator: str, mdp: TabularMdp, target: Policy, behavior: Policy):
        self.cfg, self.operator, self.mdp = cfg, operator, mdp
        self.target, self.behavior = target, behavior
        self.c = operator_traces(cfg, operator, target, behavior)
        self.weights = None
        self.estimator = None
        self.q_pi = None
        if operator == "marginalized_exact":
            self.weights = trace_to_weights(mdp, target, behavior, self.c)
        elif operator == "marginalized_estimated":
            if cfg.estimator == "alg2":
                self.estimator = TabularWeightEstimator(mdp, self.c, cfg.estimator_alpha)
            else:
                self.estimator = _GdaWeights(mdp, behavior, self.c, cfg.gda_lr)
            self.weights = np.zeros((mdp.n_pairs, mdp.n_pairs))
        elif operator == "exact":
            self.q_pi = exact_q(mdp, target)
        self._disc = np.zeros((0, 0))

    def _discounts(self, n: int) -> np.ndarray:
        if self._disc.shape[0] < n:
            gap = np.arange(n)[None, :] - np.arange(n)[:, None]
            self._disc = np.where(gap >= 0, self.mdp.discount ** np.maximum(gap, 0), 0.0)
        return self._disc[:n, :n]

    def observe(self, roll: Rollout) -> None:
        """Feed a rollout to the weight estimator, if any."""
        if isinstance(self.estimator, TabularWeightEstimator):
            self.estimator.update(roll.pairs)
            self.weights = self.estimator.estimate.normalized()
        elif isinstance(self.estimator, _GdaWeights):
            self.estimator.step(self.cfg.gda_steps)
            self.weights = self.estimator.weights()

    def __call__(self, q: np.ndarray, roll: Rollout) -> np.ndarray:
        p = roll.pairs
        if self.operator == "exact":
            return self.q_pi[p]
        g = self.mdp.discount
        delta = roll.rewards + g * state_value(self.target, q)[roll.next_states] - q[p]
        if self.operator == "one_step":
            return q[p] + delta
        if self.weights is None:
            c_along = self.c[p]
            acc = np.empty(p.size)
            run = 0.0
            for t in range(p.size - 1, -1, -1):
                run = delta[t] + (g * c_along[t + 1] * run if t + 1 < p.size else 0.0)
                acc[t] = run
            return q[p] + acc
        mix = self.weights[np.ix_(p, p)] * self._discounts(p.size)
        return q[p] + mix @ delta


def _eligible(roll: Rollout, discount: float, tail_tol: float) -> np.ndarray:
    """Positions whose unobserved tail weight is below ``tail_tol``."""
    n = roll.pairs.size
    if roll.terminated:
        return np.ones(n, dtype=bool)
    remaining = n - np.arange(n)
    return discount ** remaining <= tail_tol


def ema_update(q: np.ndarray, pairs: np.ndarray, targets: np.ndarray, alpha: float) -> None:
    """In-place ``Q <- (1 - alpha) Q + alpha target`` along a rollout, in order."""
    if pairs.size == 0:
        return
    rank = occurrence_rank(pairs)
    for r in range(int(rank.max()) + 1):
        k = rank == r
        q[pairs[k]] = (1.0 - alpha) * q[pairs[k]] + alpha * targets[k]


def relative_error(q: np.ndarray, q_pi: np.ndarray, mdp: TabularMdp, state: int, metric: str) -> float:
    rows = slice(state * mdp.n_actions, (state + 1) * mdp.n_actions)
    diff, ref = np.abs(q[rows] - q_pi[rows]), np.abs(q_pi[rows])
    if metric == "sum_relative":
        nz = ref > 0
        return float(np.sum(diff[nz] / ref[nz]))
    total = ref.sum()
    return float(diff.sum() / total) if total > 0 else float(diff.sum())


# ---------------------------------------------------------------------------
# Evaluation


def _evaluate_seed(cfg: ExperimentConfig, operator: str, seed_seq, checkpoints=()) -> tuple[np.ndarray, dict]:
    mdp, target, behavior, x0 = build_environment(cfg)
    rng = np.random.default_rng(seed_seq)
    q_pi = exact_q(mdp, target)
    q = q_pi.copy() if cfg.q_init == "exact" else np.zeros(mdp.n_pairs)
    make_target = OperatorTargets(cfg, operator, mdp, target, behavior)
    steps = cfg.max_steps or truncation_horizon(mdp.discount)
    stream = rollouts(mdp, behavior, x0, rng, steps)
    errors = np.empty(cfg.n_iterations + 1)
    errors[0] = relative_error(q, q_pi, mdp, x0, cfg.metric)
    snaps = {}
    wanted = set(checkpoints)
    if 0 in wanted:
        snaps[0] = state_value(target, q)
    for it in range(1, cfg.n_iterations + 1):
        roll = next(stream)
        make_target.observe(roll)
        est = make_target(q, roll)
        ok = _eligible(roll, mdp.discount, cfg.tail_tol)
        ema_update(q, roll.pairs[ok], est[ok], cfg.q_step_size)
        errors[it] = relative_error(q, q_pi, mdp, x0, cfg.metric)
        if it in wanted:
            snaps[it] = state_value(target, q)
    return errors, snaps


def run_evaluation(cfg: ExperimentConfig, out_dir=None) -> dict[str, MetricSeries]:
    """Relative error at the start state per iteration, one series per operator."""
    results = {}
    seeds = seed_sequences(cfg)
    for op in cfg.operators:
        runs = _map(cfg, partial(_eval_errors, cfg, op), seeds)
        results[op] = MetricSeries.from_runs(np.vstack(runs))
        log.info("%s: final mean error %.4g", op, results[op].mean[-1])
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for op, series in results.items():
            rows = [(i, series.mean[i], series.stderr[i]) for i in range(len(series))]
            write_csv(out / f"eval_{op}.csv", ["iteration", "mean_error", "stderr"], rows)
        write_json(
            out / "eval_summary.json",
            {
                "command": "eval",
                "config": cfg.to_text(),
                "final_mean_error": {op: s.mean[-1] for op, s in results.items()},
                "final_seed_std": {op: _seed_std(s) for op, s in results.items()},
                "n_seeds": cfg.n_seeds,
            },
        )
    return results


def _eval_errors(cfg, op, seed_seq):
    return _evaluate_seed(cfg, op, seed_seq)[0]


def _eval_snapshots(cfg, op, seed_seq):
    return _evaluate_seed(cfg, op, seed_seq, cfg.checkpoints)[1]


def _seed_std(series: MetricSeries) -> float:
    if series.per_seed is None or series.n_seeds < 2:
        return 0.0
    return float(series.per_seed[:, -1].std(ddof=1))


def run_openworld_heatmap(cfg: ExperimentConfig, out_dir=None) -> dict[str, dict[int, np.ndarray]]:
    """Seed-averaged value grids at each checkpoint, one set per operator."""
    mdp, target, _, _ = build_environment(cfg)
    side = cfg.side if cfg.env == "openworld" else 1
    v_exact = state_value(target, exact_q(mdp, target))
    cfg = cfg.replace(checkpoints=sorted(c for c in cfg.checkpoints if c <= cfg.n_iterations))
    seeds = seed_sequences(cfg)
    grids: dict[str, dict[int, np.ndarray]] = {}
    for op in cfg.operators:
        snaps = _map(cfg, partial(_eval_snapshots, cfg, op), seeds)
        grids[op] = {k: np.mean([s[k] for s in snaps], axis=0).reshape(side, -1) for k in cfg.checkpoints}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_grid(out / "heatmap_exact.csv", v_exact.reshape(side, -1))
        for op, by_iter in grids.items():
            for k, grid in by_iter.items():
                write_grid(out / f"heatmap_{op}_iter{k}.csv", grid)
        write_json(
            out / "heatmap_summary.json",
            {
                "command": "openworld",
                "config": cfg.to_text(),
                "max_abs_error": {
                    op: {str(k): float(np.abs(g.reshape(-1) - v_exact).max()) for k, g in by_iter.items()}
                    for op, by_iter in grids.items()
                },
            },
        )
    return grids


# ---------------------------------------------------------------------------
# Policy iteration


def greedy_policy(q: np.ndarray, n_states: int, n_actions: int) -> Policy:
    """Greedy policy; near-ties go to the lowest action index."""
    table = q.reshape(n_states, n_actions)
    best = table >= table.max(axis=1, keepdims=True) - TIE_TOL
    return Policy.deterministic(best.argmax(axis=1), n_actions)


def mc_return(mdp: TabularMdp, policy: Policy, n: int, rng, horizon: int) -> float:
    """Mean discounted return of ``policy`` from uniformly drawn non-terminal states."""
    live = np.array([x for x in range(mdp.n_states) if x not in mdp.terminal_states])
    x = rng.choice(live, size=n)
    cum_pi = np.cumsum(policy.probs, axis=1)
    cum_p = np.cumsum(mdp.transition, axis=2)
    ret = np.zeros(n)
    disc = 1.0
    for _ in range(horizon):
        a = np.minimum((cum_pi[x] < rng.random(n)[:, None]).sum(axis=1), mdp.n_actions - 1)
        r = mdp.mean_reward[x, a] + mdp.reward_noise_std[x, a] * rng.standard_normal(n)
        ret += disc * r
        x = np.minimum((cum_p[x, a] < rng.random(n)[:, None]).sum(axis=1), mdp.n_states - 1)
        disc *= mdp.discount
    return float(ret.mean())


def _pi_seed(cfg: ExperimentConfig, operator: str, seed_seq) -> np.ndarray:
    mdp, _, behavior, x0 = build_environment(cfg)
    rng = np.random.default_rng(seed_seq)
    step = 0.1 if cfg.pi_mode == "soft" else 1.0
    policy = Policy.uniform(mdp.n_states, mdp.n_actions)
    q = np.zeros(mdp.n_pairs)
    horizon = truncation_horizon(mdp.discount, 1e-4)
    steps = cfg.max_steps or truncation_horizon(mdp.discount)
    stream = rollouts(mdp, behavior, x0, rng, steps)
    perf = np.empty(cfg.pi_iterations + 1)
    for i in range(cfg.pi_iterations + 1):
        perf[i] = mc_return(mdp, policy, cfg.n_eval_episodes, rng, horizon)
        if i == cfg.pi_iterations:
            break
        if operator == "exact":
            q = exact_q(mdp, policy)
        else:
            make_target = OperatorTargets(cfg, operator, mdp, policy, behavior)
            for _ in range(cfg.pi_eval_iterations):
                roll = next(stream)
                make_target.observe(roll)
                est = make_target(q, roll)
                ok = _eligible(roll, mdp.discount, cfg.tail_tol)
                ema_update(q, roll.pairs[ok], est[ok], cfg.q_step_size)
        greedy = greedy_policy(q, mdp.n_states, mdp.n_actions)
        policy = greedy.mix(policy, step)
    return perf


def run_policy_iteration(cfg: ExperimentConfig, mode: str | None = None, out_dir=None) -> dict[str, MetricSeries]:
    """Mean Monte-Carlo return per policy-iteration step, one series per operator."""
    if mode is not None:
        cfg = cfg.replace(pi_mode=mode)
    seeds = seed_sequences(cfg)
    results = {op: MetricSeries.from_runs(np.vstack(_map(cfg, partial(_pi_seed, cfg, op), seeds))) for op in cfg.operators}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for op, series in results.items():
            rows = [(i, series.mean[i], series.stderr[i]) for i in range(len(series))]
            write_csv(out / f"pi_{cfg.pi_mode}_{op}.csv", ["iteration", "mean_return", "stderr"], rows)
        write_json(
            out / f"pi_{cfg.pi_mode}_summary.json",
            {
                "command": "pi",
                "mode": cfg.pi_mode,
                "config": cfg.to_text(),
                "final_mean_return": {op: s.mean[-1] for op, s in results.items()},
            },
        )
    return results


# ---------------------------------------------------------------------------
# TD weights


def parse_start(cfg: ExperimentConfig, text: str, mdp: TabularMdp) -> tuple[int, int]:
    parts = [int(p) for p in text.split(":")]
    if cfg.env == "openworld":
        if len(parts) != 3:
            raise ValueError(f"weight start {text!r} must be row:col:action")
        if not (0 <= parts[0] < cfg.side and 0 <= parts[1] < cfg.side):
            raise ValueError(f"weight start {text!r} lies off the grid")
        parts = [parts[0] * cfg.side + parts[1], parts[2]]
    elif len(parts) != 2:
        raise ValueError(f"weight start {text!r} must be state:action")
    mdp.pair(*parts)
    return parts[0], parts[1]


def default_weight_starts(cfg: ExperimentConfig) -> list[str]:
    if cfg.env == "chain":
        return [f"0:{cfg.optimal_action}"]
    n = cfg.side
    return [f"0:0:{DOWN}", f"0:{n - 1}:{DOWN}", f"{n - 1}:0:{RIGHT}", f"{n - 1}:{n - 2}:{RIGHT}"]


def export_weights(cfg: ExperimentConfig, out_dir=None, weights=None) -> dict[str, np.ndarray]:
    """Per-state TD weights averaged over actions for each configured start pair.

    Uses the exact weights of the configured traces unless ``weights`` is
    given or the operators include ``marginalized_estimated``, in which case
    the estimator runs for ``n_iterations`` rollouts.
    """
    mdp, target, behavior, x0 = build_environment(cfg)
    c = operator_traces(cfg, "retrace", target, behavior)
    if weights is None:
        if "marginalized_estimated" in cfg.operators:
            est = TabularWeightEstimator(mdp, c, cfg.estimator_alpha)
            rng = np.random.default_rng(seed_sequences(cfg)[0])
            stream = rollouts(mdp, behavior, x0, rng, cfg.max_steps or truncation_horizon(mdp.discount))
            for _ in range(cfg.n_iterations):
                est.update(next(stream).pairs)
            weights = est.estimate.normalized()
        else:
            weights = trace_to_weights(mdp, target, behavior, c)
    side = cfg.side if cfg.env == "openworld" else 1
    grids, mass = {}, {}
    for text in cfg.weight_starts or default_weight_starts(cfg):
        start = parse_start(cfg, text, mdp)
        row = weights[mdp.pair(*start)]
        grid = row.reshape(mdp.n_states, mdp.n_actions).mean(axis=1).reshape(side, -1)
        grids[text] = grid
        mass[text] = float(row @ discounted_visitation(mdp, behavior, start))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for text, grid in grids.items():
            write_grid(out / f"weights_{text.replace(':', '_')}.csv", grid)
        write_json(out / "weights_summary.json", {"command": "weights", "config": cfg.to_text(), "mass": mass})
    return grids


# ---------------------------------------------------------------------------
# Output


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def write_grid(path, grid: np.ndarray) -> None:
    grid = np.atleast_2d(grid)
    write_csv(path, [f"col{j}" for j in range(grid.shape[1])], grid.tolist())


def write_json(path, payload) -> None:
    def default(o):
        if isinstance(o, np.generic):
            return o.item()
        if isinstance(o, np.ndarray):
            return o.tolist()
        raise TypeError(type(o).__name__)

    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, default=default) + "\n")
