"""Benchmark MDPs: a reward-at-the-end chain and a deterministic grid maze."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mdp import MdpError, Policy, TabularMdp

LEFT, UP, RIGHT, DOWN = range(4)
_MOVES = {LEFT: (0, -1), UP: (-1, 0), RIGHT: (0, 1), DOWN: (1, 0)}


@dataclass(frozen=True)
class ChainSpec:
    """Chain of ``horizon`` states followed by an absorbing terminal state.

    Every action moves one step right. Only the move out of the last
    non-terminal state is rewarded, with mean 1 for ``optimal_action`` and 0
    otherwise, plus Gaussian noise of std ``noise_std``.
    """

    n_actions: int = 5
    horizon: int = 10
    off_policy_level: float = 0.0
    noise_std: float = 0.1
    optimal_action: int = 0
    discount: float = 0.95

    def __post_init__(self):
        if self.horizon < 2:
            raise MdpError(f"horizon must be at least 2, got {self.horizon}")
        if self.n_actions < 1 or not 0 <= self.optimal_action < self.n_actions:
            raise MdpError("optimal_action must index one of n_actions actions")
        if not 0.0 <= self.off_policy_level <= 1.0:
            raise MdpError(f"off_policy_level must lie in [0, 1], got {self.off_policy_level}")
        if self.noise_std < 0:
            raise MdpError("noise_std must be nonnegative")


@dataclass(frozen=True)
class OpenWorldSpec:
    """``side x side`` grid; start top-left, rewarded terminal goal bottom-right."""

    side: int = 10
    discount: float = 0.95

    def __post_init__(self):
        if self.side < 2:
            raise MdpError(f"side must be at least 2, got {self.side}")


def build_chain(spec: ChainSpec = ChainSpec()) -> tuple[TabularMdp, Policy, Policy]:
    """Return ``(mdp, target, behavior)`` for the chain.

    States ``0..horizon-1`` are the chain, state ``horizon`` is terminal.
    The target always plays ``optimal_action``; the behaviour mixes it with
    the uniform policy at level ``off_policy_level``.
    """
    n_s, n_a, last = spec.horizon + 1, spec.n_actions, spec.horizon
    p = np.zeros((n_s, n_a, n_s))
    for x in range(spec.horizon):
        p[x, :, x + 1] = 1.0
    p[last, :, last] = 1.0
    r = np.zeros((n_s, n_a))
    r[last - 1, spec.optimal_action] = 1.0
    sigma = np.zeros((n_s, n_a))
    sigma[last - 1, :] = spec.noise_std
    mdp = TabularMdp(p, r, spec.discount, sigma, frozenset({last}))
    target = Policy.deterministic(np.full(n_s, spec.optimal_action), n_a)
    behavior = target.mix(Policy.uniform(n_s, n_a), spec.off_policy_level)
    return mdp, target, behavior


def grid_state(side: int, row: int, col: int) -> int:
    return row * side + col


def build_open_world(spec: OpenWorldSpec = OpenWorldSpec()) -> tuple[TabularMdp, Policy, Policy]:
    """Return ``(mdp, target, behavior)`` for the grid maze.

    Actions are left, up, right, down (0..3); moves off the grid leave the
    agent in place. Entering the goal pays 1 and ends the episode. The
    behaviour is uniform and the target is uniform over down and right.
    """
    n = spec.side
    n_s = n * n
    goal = grid_state(n, n - 1, n - 1)
    p = np.zeros((n_s, 4, n_s))
    r = np.zeros((n_s, 4))
    for row in range(n):
        for col in range(n):
            x = grid_state(n, row, col)
            for a, (dr, dc) in _MOVES.items():
                if x == goal:
                    p[x, a, x] = 1.0
                    continue
                nr, nc = row + dr, col + dc
                if not (0 <= nr < n and 0 <= nc < n):
                    nr, nc = row, col
                y = grid_state(n, nr, nc)
                p[x, a, y] = 1.0
                if y == goal:
                    r[x, a] = 1.0
    mdp = TabularMdp(p, r, spec.discount, None, frozenset({goal}))
    probs = np.zeros((n_s, 4))
    probs[:, [RIGHT, DOWN]] = 0.5
    return mdp, Policy(probs), Policy.uniform(n_s, 4)


def open_world_start(spec: OpenWorldSpec) -> int:
    return 0
