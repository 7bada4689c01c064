"""Experiment configuration: a flat ``key = value`` text format.

Blank lines and lines starting with ``#`` are ignored. Values are parsed
according to the field's type; lists are comma separated.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

from ..envs import ChainSpec, OpenWorldSpec

OPERATORS = ("one_step", "retrace", "marginalized_exact", "marginalized_estimated", "exact")
ESTIMATORS = ("alg2", "gda")
METRICS = ("sum_relative", "relative_norm")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"config field {field_name!r}: {message}")
        self.field = field_name


@dataclass
class ExperimentConfig:
    env: str = "chain"
    # chain
    n_actions: int = 5
    horizon: int = 10
    off_policy_level: float = 0.0
    noise_std: float = 0.1
    optimal_action: int = 0
    # open world
    side: int = 10
    discount: float = 0.95
    # operators
    operators: list = field(default_factory=lambda: ["one_step", "retrace", "marginalized_exact"])
    lam: float = 1.0
    cbar: float = 1.0
    estimator: str = "alg2"
    estimator_alpha: float = 0.1
    gda_steps: int = 20
    gda_lr: float = 0.5
    # evaluation loop
    n_iterations: int = 1000
    n_seeds: int = 100
    q_step_size: float = 0.1
    q_init: str = "zero"
    metric: str = "sum_relative"
    max_steps: int = 0
    tail_tol: float = 1e-6
    checkpoints: list = field(default_factory=lambda: [0, 50, 100, 200])
    # policy iteration
    pi_mode: str = "soft"
    pi_iterations: int = 30
    pi_eval_iterations: int = 20
    n_eval_episodes: int = 200
    # weights export
    # "row:col:action" on the grid or "state:action" on the chain; empty picks corners
    weight_starts: list = field(default_factory=list)
    seed: int = 0
    workers: int = 1

    def validate(self) -> "ExperimentConfig":
        if self.env not in ("chain", "openworld"):
            raise ConfigError("env", f"must be 'chain' or 'openworld', got {self.env!r}")
        if self.n_seeds < 1:
            raise ConfigError("n_seeds", "must be at least 1")
        if self.n_iterations < 0:
            raise ConfigError("n_iterations", "must be nonnegative")
        if not 0.0 < self.q_step_size <= 1.0:
            raise ConfigError("q_step_size", "must lie in (0, 1]")
        if not 0.0 <= self.discount < 1.0:
            raise ConfigError("discount", "must lie in [0, 1)")
        if not self.operators:
            raise ConfigError("operators", "at least one operator is required")
        for op in self.operators:
            if op not in OPERATORS:
                raise ConfigError("operators", f"unknown operator {op!r}; choose from {', '.join(OPERATORS)}")
        if self.estimator not in ESTIMATORS:
            raise ConfigError("estimator", f"must be one of {', '.join(ESTIMATORS)}")
        if self.metric not in METRICS:
            raise ConfigError("metric", f"must be one of {', '.join(METRICS)}")
        if self.q_init not in ("zero", "exact"):
            raise ConfigError("q_init", "must be 'zero' or 'exact'")
        if self.pi_mode not in ("soft", "hard"):
            raise ConfigError("pi_mode", "must be 'soft' or 'hard'")
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError("lam", "must lie in [0, 1]")
        if self.cbar < 0:
            raise ConfigError("cbar", "must be nonnegative (inf allowed)")
        if not 0.0 < self.estimator_alpha <= 1.0:
            raise ConfigError("estimator_alpha", "must lie in (0, 1]")
        if self.workers < 1:
            raise ConfigError("workers", "must be at least 1")
        if any(c < 0 for c in self.checkpoints):
            raise ConfigError("checkpoints", "must be nonnegative")
        try:
            self.env_spec()
        except ValueError as exc:
            # environment errors lead with the offending field
            name = str(exc).split()[0]
            known = {f.name for f in dataclasses.fields(self)}
            raise ConfigError(name if name in known else "env", str(exc)) from exc
        return self

    def env_spec(self):
        if self.env == "chain":
            return ChainSpec(
                self.n_actions, self.horizon, self.off_policy_level, self.noise_std,
                self.optimal_action, self.discount,
            )
        return OpenWorldSpec(self.side, self.discount)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes).validate()

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, list):
                value = ", ".join(str(v) for v in value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


def _parse_value(name: str, kind, raw: str):
    try:
        if kind is bool:
            if raw.lower() not in ("true", "false"):
                raise ValueError("expected true or false")
            return raw.lower() == "true"
        if kind is int:
            return int(raw)
        if kind is float:
            value = float(raw)
            if math.isnan(value):
                raise ValueError("nan is not allowed")
            return value
        if kind is list:
            return [s.strip() for s in raw.split(",") if s.strip()]
        return raw
    except ValueError as exc:
        raise ConfigError(name, f"cannot parse {raw!r}: {exc}") from None


_TYPES = {"int": int, "float": float, "str": str, "list": list, "bool": bool}


def parse_config(text: str) -> ExperimentConfig:
    """Parse config text; unknown keys and malformed values raise ``ConfigError``."""
    fields = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line, f"line {lineno} is not of the form key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise ConfigError(key, "unknown field")
        kind = _TYPES[fields[key].type] if isinstance(fields[key].type, str) else fields[key].type
        values[key] = _parse_value(key, kind, raw)
    cfg = ExperimentConfig(**values)
    if "checkpoints" in values:
        cfg.checkpoints = [_parse_value("checkpoints", int, c) for c in cfg.checkpoints]
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())
