"""Run configuration: one flat dataclass, read from sectioned YAML.

Sections in the file (``environment``, ``model``, ``rollouts``, ``agent``,
``training``) are for readability only; every key maps onto exactly one
:class:`RunConfig` field and unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import yaml

from .noise import NOISE_KINDS

__all__ = ["ConfigError", "RunConfig", "SECTIONS", "load_config", "dump_config", "linear_schedule"]

ALGORITHMS = ("macura", "mbpo", "m2ac", "sac")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # environment
    environment: str = "pendulum"
    action_noise: float = 0.0
    max_torque: float = 5.0
    episode_length: int = 200
    # algorithm and model
    algorithm: str = "macura"
    pnns_per_pe: int = 5
    pnn_layers: int = 4
    pnn_width: int = 64
    model_batch_size: int = 256
    model_learning_rate: float = 1e-3
    model_holdout_fraction: float = 0.1
    model_patience: int = 5
    model_max_epochs: Optional[int] = 50
    # rollouts
    rollouts_per_round: int = 128
    rollout_length_max: int = 10
    rollout_length_schedule: Optional[tuple] = None  # (first_epoch, last_epoch, start_length, end_length)
    quantile_factor_zeta: float = 0.95
    scaling_factor_xi: float = 1.0
    retain_rounds: int = 4
    rank_keep_fraction: float = 0.875
    # agent
    sac_updates_g_max: int = 10
    sac_updates_fixed: int = 1
    sac_batch_size: int = 256
    sac_layers: int = 2
    sac_width: int = 128
    sac_target_entropy: float = -1.0
    sac_auto_temperature: bool = True
    discount: float = 0.99
    target_smoothing: float = 0.005
    actor_learning_rate: float = 3e-4
    critic_learning_rate: float = 3e-4
    temperature_learning_rate: float = 3e-4
    env_data_fraction: float = 0.05
    exploration: str = "pink"
    pink_beta: float = 1.0
    # training loop
    steps_per_epoch: int = 1000
    epochs: int = 15
    steps_before_retraining: int = 250
    initial_random_steps: int = 500
    env_buffer_capacity: int = 100_000
    eval_episodes: int = 10
    checkpoint_every_epochs: int = 0
    stop_at_return: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        counts = ("episode_length", "pnns_per_pe", "pnn_layers", "pnn_width", "model_batch_size", "rollouts_per_round",
                  "rollout_length_max", "retain_rounds", "sac_batch_size", "sac_layers", "sac_width", "steps_per_epoch",
                  "epochs", "steps_before_retraining", "env_buffer_capacity", "eval_episodes")
        for name in counts:
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.exploration not in NOISE_KINDS:
            raise ConfigError(f"exploration must be one of {NOISE_KINDS}, got {self.exploration!r}")
        if not self.scaling_factor_xi > 0:
            raise ConfigError("scaling_factor_xi must be > 0")
        if not 0 < self.quantile_factor_zeta < 1:
            raise ConfigError("quantile_factor_zeta must lie in (0, 1)")
        if not 0 <= self.discount < 1:
            raise ConfigError("discount must lie in [0, 1)")
        if self.sac_updates_g_max < 0 or self.sac_updates_fixed < 0 or self.initial_random_steps < 0:
            raise ConfigError("update counts and initial_random_steps must be >= 0")
        if self.steps_per_epoch % self.steps_before_retraining:
            raise ConfigError("steps_per_epoch must be a multiple of steps_before_retraining")
        if self.action_noise < 0:
            raise ConfigError("action_noise must be >= 0")
        if self.rollout_length_schedule is not None:
            sched = tuple(self.rollout_length_schedule)
            if len(sched) != 4 or sched[0] >= sched[1] or min(sched[2:]) < 1:
                raise ConfigError("rollout_length_schedule must be (first_epoch, last_epoch, start, end)")
            object.__setattr__(self, "rollout_length_schedule", tuple(int(v) for v in sched))

    @property
    def uses_model(self) -> bool:
        return self.algorithm != "sac"

    @property
    def scheduler(self) -> str:
        return {"macura": "macura", "mbpo": "vanilla", "m2ac": "rank_based"}.get(self.algorithm, "none")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


SECTIONS = {
    "environment": ("environment", "action_noise", "max_torque", "episode_length"),
    "model": ("algorithm", "pnns_per_pe", "pnn_layers", "pnn_width", "model_batch_size", "model_learning_rate",
              "model_holdout_fraction", "model_patience", "model_max_epochs"),
    "rollouts": ("rollouts_per_round", "rollout_length_max", "rollout_length_schedule", "quantile_factor_zeta",
                 "scaling_factor_xi", "retain_rounds", "rank_keep_fraction"),
    "agent": ("sac_updates_g_max", "sac_updates_fixed", "sac_batch_size", "sac_layers", "sac_width",
              "sac_target_entropy", "sac_auto_temperature", "discount", "target_smoothing", "actor_learning_rate",
              "critic_learning_rate", "temperature_learning_rate", "env_data_fraction", "exploration", "pink_beta"),
    "training": ("steps_per_epoch", "epochs", "steps_before_retraining", "initial_random_steps", "env_buffer_capacity",
                 "eval_episodes", "checkpoint_every_epochs", "stop_at_return", "seed"),
}


def _from_mapping(data: dict) -> RunConfig:
    known = {f.name: f for f in fields(RunConfig)}
    flat = {}
    for key, value in (data or {}).items():
        if key in SECTIONS and isinstance(value, dict):
            for sub, sub_value in value.items():
                if sub not in SECTIONS[key]:
                    raise ConfigError(f"unknown key {key}.{sub}")
                flat[sub] = sub_value
        elif key in known:
            flat[key] = value
        else:
            raise ConfigError(f"unknown key {key!r}")
    try:
        return RunConfig(**flat)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError("config file must hold a mapping")
    return _from_mapping(data)


def dump_config(cfg: RunConfig) -> str:
    values = dataclasses.asdict(cfg)
    if values["rollout_length_schedule"] is not None:
        values["rollout_length_schedule"] = list(values["rollout_length_schedule"])
    nested = {section: {k: values[k] for k in keys} for section, keys in SECTIONS.items()}
    return yaml.safe_dump(nested, sort_keys=False)


def linear_schedule(epoch: int, first_epoch: int, last_epoch: int, start: int, end: int) -> int:
    """Integer value moving linearly from ``start`` to ``end`` over [first_epoch, last_epoch], truncated."""
    if epoch <= first_epoch:
        return start
    frac = min((epoch - first_epoch) / (last_epoch - first_epoch), 1.0)
    return int(frac * (end - start) + start)
