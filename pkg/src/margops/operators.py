"""Multi-step and marginalized evaluation operators on tabular MDPs.

TD weights are stored as a square matrix ``W`` over flattened pairs with
``W[i, j] = w_i(j)``: row ``i`` is the start pair, column ``j`` the pair at
which the Bellman error is weighted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mdp import (
    MdpError,
    Policy,
    TabularMdp,
    _check_pair_vector,
    _check_policy,
    balance_residual,
    bellman_error_vector,
    discounted_visitation,
    joint_transition_matrix,
    resolvent,
    state_transition_matrix,
)

ZERO_VISITATION = 1e-14
POWER_ITERATIONS = 200
RADIUS_THRESHOLD = 1.0 - 1e-9


class SeriesDivergenceError(ArithmeticError):
    """The trace series sum_t (gamma P^{c mu})^t does not converge."""


class CoverageError(MdpError):
    """Target policy puts mass where the behaviour policy has none."""


@dataclass(frozen=True)
class TraceScheme:
    """A Markovian trace family ``c(x, a)``.

    ``kind`` is one of ``one_step``, ``importance_sampling``, ``retrace``,
    ``tree_backup``, ``q_lambda`` or ``custom``.
    """

    kind: str
    lam: float = 1.0
    cbar: float = 1.0
    values: tuple | None = None

    KINDS = ("one_step", "importance_sampling", "retrace", "tree_backup", "q_lambda", "custom")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown trace scheme {self.kind!r}")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.cbar < 0:
            raise ValueError(f"truncation level must be nonnegative, got {self.cbar}")
        if self.kind == "custom" and self.values is None:
            raise ValueError("custom traces need explicit values")

    @classmethod
    def one_step(cls):
        return cls("one_step")

    @classmethod
    def importance_sampling(cls):
        return cls("importance_sampling")

    @classmethod
    def retrace(cls, lam: float = 1.0, cbar: float = 1.0):
        return cls("retrace", lam=lam, cbar=cbar)

    @classmethod
    def tree_backup(cls):
        return cls("tree_backup")

    @classmethod
    def q_lambda(cls, lam: float):
        return cls("q_lambda", lam=lam)

    @classmethod
    def custom(cls, values):
        return cls("custom", values=tuple(np.asarray(values, dtype=float).reshape(-1)))


def importance_ratios(target: Policy, behavior: Policy) -> np.ndarray:
    """Flattened ``pi / mu``; zero where ``mu`` is zero."""
    if target.probs.shape != behavior.probs.shape:
        raise MdpError("target and behaviour policies differ in shape")
    bad = (behavior.probs <= 0) & (target.probs > 0)
    if np.any(bad):
        x, a = map(int, np.argwhere(bad)[0])
        raise CoverageError(f"behaviour policy has zero mass at ({x}, {a}) where target does not")
    ratio = np.divide(
        target.probs, behavior.probs, out=np.zeros_like(target.probs), where=behavior.probs > 0
    )
    return ratio.reshape(-1)


def materialize_traces(scheme: TraceScheme, target: Policy, behavior: Policy) -> np.ndarray:
    n = target.probs.size
    if scheme.kind == "custom":
        c = np.asarray(scheme.values, dtype=float)
        if c.shape != (n,):
            raise MdpError(f"custom traces must have length {n}")
        if np.any(c < 0):
            raise MdpError("custom traces must be nonnegative")
        return c.copy()
    ratio = importance_ratios(target, behavior)
    if scheme.kind == "one_step":
        return np.zeros(n)
    if scheme.kind == "importance_sampling":
        return ratio
    if scheme.kind == "retrace":
        return scheme.lam * np.minimum(scheme.cbar, ratio)
    if scheme.kind == "tree_backup":
        return target.flat.copy()
    return np.full(n, scheme.lam)


def is_contraction_safe(c, target: Policy, behavior: Policy, tol: float = 1e-12) -> bool:
    """Whether ``0 <= c <= pi / mu`` wherever ``mu > 0``."""
    c = np.asarray(c, dtype=float)
    ratio = importance_ratios(target, behavior)
    support = behavior.flat > 0
    return bool(np.all(c >= 0) and np.all(c[support] <= ratio[support] + tol))


def spectral_radius_estimate(mat: np.ndarray, iterations: int = POWER_ITERATIONS) -> float:
    """Growth rate of ``|mat|^k 1`` over the second half of a power iteration."""
    a = np.abs(mat)
    v = np.ones(a.shape[0])
    logs = []
    for _ in range(iterations):
        v = a @ v
        s = np.max(v)
        if s == 0.0:
            return 0.0
        v /= s
        logs.append(np.log(s))
    return float(np.exp(np.mean(logs[iterations // 2 :])))


def _trace_resolvent(mdp: TabularMdp, behavior: Policy, c) -> np.ndarray:
    """``(I - gamma P^{c mu})^{-1}`` after checking the series converges."""
    p_cmu = joint_transition_matrix(mdp, behavior, c)
    scaled = mdp.discount * p_cmu
    if np.max(scaled.sum(axis=1)) >= 1.0:
        rho = spectral_radius_estimate(scaled)
        if rho >= RADIUS_THRESHOLD:
            raise SeriesDivergenceError(
                f"spectral radius of gamma P^(c mu) is about {rho:.6g}; traces too large"
            )
    return resolvent(p_cmu, mdp.discount)


def apply_multistep(mdp: TabularMdp, target: Policy, behavior: Policy, c, q) -> np.ndarray:
    """Exact multi-step operator ``Q + (I - gamma P^{c mu})^{-1} Delta``."""
    _check_policy(mdp, target)
    q = _check_pair_vector(mdp, q, "q")
    c = _check_pair_vector(mdp, c, "trace")
    return q + _trace_resolvent(mdp, behavior, c) @ bellman_error_vector(mdp, target, q)


def apply_marginalized(mdp: TabularMdp, target: Policy, behavior: Policy, w, q) -> np.ndarray:
    """Exact marginalized operator with TD weight matrix ``w``.

    Component (x, a) is ``Q(x,a) + (1-gamma)^{-1} sum d^mu_{x,a} w_{x,a} Delta``.
    """
    q = _check_pair_vector(mdp, q, "q")
    w = _check_weight_matrix(mdp, w)
    occupancy = resolvent(joint_transition_matrix(mdp, behavior), mdp.discount)
    return q + (occupancy * w) @ bellman_error_vector(mdp, target, q)


def apply_marginalized_row(mdp: TabularMdp, target: Policy, behavior: Policy, w_row, q, start) -> float:
    """Component of the marginalized operator at ``start`` given one weight row."""
    q = _check_pair_vector(mdp, q, "q")
    w_row = _check_pair_vector(mdp, w_row, "w row")
    d_mu = discounted_visitation(mdp, behavior, start)
    delta = bellman_error_vector(mdp, target, q)
    return float(q[mdp.pair(*start)] + (d_mu * w_row) @ delta / (1.0 - mdp.discount))


def _check_weight_matrix(mdp: TabularMdp, w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    if w.shape != (mdp.n_pairs, mdp.n_pairs):
        raise MdpError(f"TD weights must be {mdp.n_pairs}x{mdp.n_pairs}, got {w.shape}")
    if not np.all(np.isfinite(w)):
        raise MdpError("TD weights must be finite")
    return w


def _safe_ratio(num: np.ndarray, den: np.ndarray, zero_tol: float) -> np.ndarray:
    out = np.zeros(np.broadcast(num, den).shape)
    np.divide(num, den, out=out, where=den > zero_tol)
    return out


def trace_to_weights(mdp: TabularMdp, target: Policy, behavior: Policy, c) -> np.ndarray:
    """TD weights ``w^c`` making the marginalized operator equal ``R^c``.

    Entries where the behaviour visitation vanishes are set to zero.
    """
    _check_policy(mdp, target)
    c = _check_pair_vector(mdp, c, "trace")
    trace_occ = _trace_resolvent(mdp, behavior, c)
    occ = resolvent(joint_transition_matrix(mdp, behavior), mdp.discount)
    return _safe_ratio(trace_occ, occ, ZERO_VISITATION / (1.0 - mdp.discount))


def marginalized_is_weights(mdp: TabularMdp, target: Policy, behavior: Policy) -> np.ndarray:
    """Marginalized importance ratios ``d^pi / d^mu`` (zero off support)."""
    occ_pi = resolvent(joint_transition_matrix(mdp, target), mdp.discount)
    occ_mu = resolvent(joint_transition_matrix(mdp, behavior), mdp.discount)
    return _safe_ratio(occ_pi, occ_mu, ZERO_VISITATION / (1.0 - mdp.discount))


def weights_from_visitation(mdp: TabularMdp, behavior: Policy, d, start) -> np.ndarray:
    """Row of TD weights ``d / d^mu_{x,a}``; zero where ``d^mu`` vanishes."""
    d = _check_pair_vector(mdp, d, "d")
    d_mu = discounted_visitation(mdp, behavior, start)
    off = (d_mu <= ZERO_VISITATION) & (np.abs(d) > ZERO_VISITATION)
    if np.any(off):
        raise MdpError(
            f"visitation mass at pair {mdp.unpair(int(np.argmax(off)))} "
            "which the behaviour policy never reaches"
        )
    return _safe_ratio(d, d_mu, ZERO_VISITATION)


@dataclass(frozen=True, eq=False)
class ResidualReport:
    start: tuple[int, int]
    residual: np.ndarray
    local_rate: float

    @property
    def contractive(self) -> bool:
        return self.local_rate < 1.0


def residual_report(mdp: TabularMdp, target: Policy, behavior: Policy, w, start) -> ResidualReport:
    """Residual of ``w * d^mu`` in the balance equation of ``target``.

    ``w`` may be the full weight matrix or just the row for ``start``.
    """
    i = mdp.pair(*start)
    w = np.asarray(w, dtype=float)
    row = w[i] if w.ndim == 2 else _check_pair_vector(mdp, w, "w row")
    d_w = row * discounted_visitation(mdp, behavior, start)
    resid = balance_residual(mdp, target, d_w, start)
    return ResidualReport(
        (int(start[0]), int(start[1])), resid, float(np.abs(resid).sum() / (1.0 - mdp.discount))
    )


def local_contraction_rates(mdp: TabularMdp, target: Policy, behavior: Policy, w) -> np.ndarray:
    """Local contraction rate of ``M^w`` for every start pair."""
    w = _check_weight_matrix(mdp, w)
    g = mdp.discount
    d_w = (1.0 - g) * resolvent(joint_transition_matrix(mdp, behavior), g) * w
    resid = (1.0 - g) * np.eye(mdp.n_pairs) + g * d_w @ joint_transition_matrix(mdp, target) - d_w
    return np.abs(resid).sum(axis=1) / (1.0 - g)


def global_contraction_rate(mdp: TabularMdp, target: Policy, behavior: Policy, w) -> float:
    return float(np.max(local_contraction_rates(mdp, target, behavior, w)))


def retrace_residual_closed_form(
    mdp: TabularMdp, target: Policy, behavior: Policy, c, start, *, compose: str = "behavior"
) -> np.ndarray:
    """Series form of the residual vector of ``w^c`` at ``start``.

    ``compose="behavior"`` uses the sub-policy ``mu * c`` and carries the
    ``(1 - gamma)`` visitation normalisation, so it equals the residual that
    :func:`residual_report` computes for ``trace_to_weights(c)``.
    ``compose="target"`` evaluates the bare series with ``pi * c``.
    """
    c = _check_pair_vector(mdp, c, "trace")
    p_pi = joint_transition_matrix(mdp, target)
    if compose == "behavior":
        p_tilde = joint_transition_matrix(mdp, behavior, c)
        scale = 1.0 - mdp.discount
    elif compose == "target":
        p_tilde = joint_transition_matrix(mdp, target, c)
        scale = 1.0
    else:
        raise ValueError(f"compose must be 'behavior' or 'target', got {compose!r}")
    if np.max(mdp.discount * p_tilde.sum(axis=1)) >= 1.0:
        if spectral_radius_estimate(mdp.discount * p_tilde) >= RADIUS_THRESHOLD:
            raise SeriesDivergenceError("residual series does not converge")
    delta = np.zeros(mdp.n_pairs)
    delta[mdp.pair(*start)] = 1.0
    # sum_t gamma^t ((P~)^T)^t delta = (I - gamma P~^T)^{-1} delta
    occ = np.linalg.solve(np.eye(mdp.n_pairs) - mdp.discount * p_tilde.T, delta)
    return scale * mdp.discount * (p_pi - p_tilde).T @ occ


# ---------------------------------------------------------------------------
# V-trace


@dataclass(frozen=True, eq=False)
class VTraceScheme:
    c: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.c, dtype=float).reshape(-1)
        rho = np.asarray(self.rho, dtype=float).reshape(-1)
        if c.shape != rho.shape:
            raise MdpError("c and rho must have the same length")
        if np.any(c < 0) or np.any(rho < 0):
            raise MdpError("V-trace coefficients must be nonnegative")
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "rho", rho)

    @classmethod
    def clipped(cls, target: Policy, behavior: Policy, cbar: float = 1.0, rhobar: float = 1.0):
        ratio = importance_ratios(target, behavior)
        return cls(np.minimum(cbar, ratio), np.minimum(rhobar, ratio))

    def check(self, mdp: TabularMdp, behavior: Policy) -> None:
        if self.c.shape != (mdp.n_pairs,):
            raise MdpError(f"V-trace coefficients must have length {mdp.n_pairs}")
        mass = (behavior.probs * self.c.reshape(behavior.probs.shape)).sum(axis=1)
        if np.any(mass > 1.0 + 1e-12):
            raise MdpError(f"mu * c exceeds one at state {int(np.argmax(mass))}")


def _vtrace_td_errors(mdp: TabularMdp, behavior: Policy, scheme: VTraceScheme, v) -> np.ndarray:
    """Per-state ``sum_a mu(a|x) rho(x,a) (r + gamma E V(x') - V(x))``."""
    v = np.asarray(v, dtype=float)
    if v.shape != (mdp.n_states,):
        raise MdpError(f"value function must have length {mdp.n_states}")
    delta = mdp.mean_reward + mdp.discount * mdp.transition @ v - v[:, None]
    return np.sum(behavior.probs * scheme.rho.reshape(delta.shape) * delta, axis=1)


def vtrace_trace_to_weights(mdp: TabularMdp, behavior: Policy, c) -> np.ndarray:
    """State-level TD weights of V-trace traces ``c``; zero off support."""
    c = _check_pair_vector(mdp, c, "trace")
    p_tilde = state_transition_matrix(mdp, behavior, c)
    scaled = mdp.discount * p_tilde
    if np.max(scaled.sum(axis=1)) >= 1.0 and spectral_radius_estimate(scaled) >= RADIUS_THRESHOLD:
        raise SeriesDivergenceError("V-trace series does not converge")
    trace_occ = resolvent(p_tilde, mdp.discount)
    occ = resolvent(state_transition_matrix(mdp, behavior), mdp.discount)
    return _safe_ratio(trace_occ, occ, ZERO_VISITATION / (1.0 - mdp.discount))


def vtrace_apply(
    mdp: TabularMdp,
    target: Policy,
    behavior: Policy,
    scheme: VTraceScheme,
    v,
    mode: str = "multistep",
    sw=None,
) -> np.ndarray:
    """Apply the V-trace operator in multi-step or marginalized form.

    The target policy enters only through ``scheme.rho``; it is accepted for
    symmetry with the Q-function operators and shape-checked.
    """
    _check_policy(mdp, target)
    scheme.check(mdp, behavior)
    g = _vtrace_td_errors(mdp, behavior, scheme, v)
    if mode == "multistep":
        if sw is not None:
            raise ValueError("state weights are only used in marginalized mode")
        p_tilde = state_transition_matrix(mdp, behavior, scheme.c)
        scaled = mdp.discount * p_tilde
        if np.max(scaled.sum(axis=1)) >= 1.0 and spectral_radius_estimate(scaled) >= RADIUS_THRESHOLD:
            raise SeriesDivergenceError("V-trace series does not converge")
        return np.asarray(v, dtype=float) + resolvent(p_tilde, mdp.discount) @ g
    if mode == "marginalized":
        if sw is None:
            raise ValueError("marginalized V-trace needs state TD weights")
        sw = np.asarray(sw, dtype=float)
        if sw.shape != (mdp.n_states, mdp.n_states):
            raise MdpError("state TD weights must be square over states")
        occ = resolvent(state_transition_matrix(mdp, behavior), mdp.discount)
        return np.asarray(v, dtype=float) + (occ * sw) @ g
    raise ValueError(f"mode must be 'multistep' or 'marginalized', got {mode!r}")
