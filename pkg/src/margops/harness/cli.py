"""Command-line entry point: ``margops {eval,openworld,pi,weights,selftest}``."""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from .config import ConfigError, ExperimentConfig, load_config
from .experiments import export_weights, run_evaluation, run_openworld_heatmap, run_policy_iteration

log = logging.getLogger("margops")


def selftest() -> list[tuple[str, bool, str]]:
    """Fast numerical identities; returns ``(name, passed, detail)`` triples."""
    from ..envs import ChainSpec, build_chain
    from ..lp import build_dual_lp
    from ..mdp import Policy, TabularMdp, exact_q, random_mdp, random_policy
    from ..operators import (
        TraceScheme,
        apply_marginalized,
        apply_multistep,
        global_contraction_rate,
        materialize_traces,
        trace_to_weights,
    )
    from ..simplex import simplex_solve

    checks = []
    mdp = random_mdp(6, 3, 0.9, seed=0)
    pi, mu = random_policy(6, 3, seed=1), random_policy(6, 3, seed=2, min_prob=0.05)
    c = materialize_traces(TraceScheme.retrace(1.0, 1.0), pi, mu)
    q = np.random.default_rng(3).normal(size=mdp.n_pairs)
    gap = np.abs(apply_marginalized(mdp, pi, mu, trace_to_weights(mdp, pi, mu, c), q) - apply_multistep(mdp, pi, mu, c, q)).max()
    checks.append(("marginalized equals multi-step", gap < 1e-8, f"max gap {gap:.2e}"))
    one = trace_to_weights(mdp, pi, mu, np.zeros(mdp.n_pairs))
    rate = global_contraction_rate(mdp, pi, mu, one)
    checks.append(("one-step contraction rate is the discount", abs(rate - 0.9) < 1e-10, f"rate {rate:.12f}"))
    q_pi = exact_q(mdp, pi)
    lp_value = simplex_solve(build_dual_lp(mdp, pi, (0, 0))).objective_value
    checks.append(("dual LP value equals Q^pi", abs(lp_value - q_pi[0]) < 1e-8, f"gap {abs(lp_value - q_pi[0]):.2e}"))
    chain, target, _ = build_chain(ChainSpec())
    value = exact_q(chain, target)[0]
    checks.append(("chain start value", abs(value - 0.95**9) < 1e-12, f"{value:.12f}"))
    p = np.zeros((1, 1, 1))
    p[0, 0, 0] = 1.0
    single = TabularMdp(p, np.ones((1, 1)), 0.9)
    v = exact_q(single, Policy.uniform(1, 1))[0]
    checks.append(("absorbing state value", abs(v - 10.0) < 1e-10, f"{v:.12f}"))
    return checks


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="margops", description="Tabular off-policy evaluation experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (
        ("eval", "relative error of each operator over iterations"),
        ("openworld", "value heatmaps at checkpoints"),
        ("pi", "policy iteration driven by each operator"),
        ("weights", "per-state TD weight grids"),
        ("selftest", "quick numerical self checks"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", default="out", help="output directory")
        if name == "pi":
            p.add_argument("--mode", choices=("soft", "hard"))
    return parser


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig().validate()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "selftest":
            results = selftest()
            for name, ok, detail in results:
                print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
            return 0 if all(ok for _, ok, _ in results) else 1
        cfg = _config(args)
        if args.command == "eval":
            for op, series in run_evaluation(cfg, args.out).items():
                print(f"{op}: final mean error {series.mean[-1]:.6g} (stderr {series.stderr[-1]:.3g})")
        elif args.command == "openworld":
            run_openworld_heatmap(cfg, args.out)
            print(f"heatmaps written to {args.out}")
        elif args.command == "pi":
            for op, series in run_policy_iteration(cfg, args.mode, args.out).items():
                print(f"{op}: final mean return {series.mean[-1]:.6g}")
        elif args.command == "weights":
            export_weights(cfg, args.out)
            print(f"weight grids written to {args.out}")
    except (ConfigError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
