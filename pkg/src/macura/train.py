"""Dyna-style training loops, policy evaluation and run artifacts.

A run is a sequence of blocks of ``steps_before_retraining`` environment
steps.  During a block the agent acts in the environment and performs G
SAC updates per step; at the end of the block the dynamics model is
retrained on ``D_env`` and one rollout round refills ``D_mod``, which
fixes G for the next block.  Pure SAC skips the model and uses G = 1.

Artifacts written to the output directory:

* ``learning_curve.csv``: one row per epoch (``CURVE_COLUMNS``)
* ``rounds.csv``: one row per block (``ROUND_COLUMNS``), the kappa trace
* ``checkpoint/``: model, agent, environment buffer and the config
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import load_arrays, save_arrays
from .config import RunConfig, dump_config, linear_schedule
from .dynamics import EnsembleModel, TrainConfig, train_ensemble
from .envs import make_env
from .noise import NoiseProcess
from .rollout import (KappaTracker, ReplayBuffer, RolloutConfig, compute_update_steps, model_buffer_capacity,
                      rollout_round, sample_mixed_batch)
from .sac import SacAgent, SacConfig, entropy_temperature

__all__ = [
    "CURVE_COLUMNS",
    "ROUND_COLUMNS",
    "EvalReport",
    "RunResult",
    "evaluate_policy",
    "evaluation_starts",
    "run",
    "run_macura",
    "run_mbpo",
    "run_sac",
    "make_agent",
    "make_model",
    "save_checkpoint",
    "load_checkpoint",
    "read_csv",
]

log = logging.getLogger(__name__)

CURVE_COLUMNS = ("epoch", "env_steps", "eval_return_mean", "eval_return_std", "kappa", "base_uncertainty",
                 "mean_rollout_length", "stored_transitions", "sac_updates", "model_holdout_nll", "temperature")
ROUND_COLUMNS = ("round", "epoch", "env_steps", "max_length", "update_steps", "base_uncertainty", "kappa",
                 "stored_transitions", "mean_rollout_length", "model_holdout_nll", "model_epochs")


@dataclass
class EvalReport:
    mean_return: float
    returns: list[float]
    episode_length: int
    discounted_returns: list[float] = field(default_factory=list)

    @property
    def std_return(self) -> float:
        return float(np.std(self.returns))


@dataclass
class RunResult:
    config: RunConfig
    out_dir: Optional[Path]
    curve: list[dict]
    rounds: list[dict]
    agent: SacAgent
    model: object
    env_buffer: ReplayBuffer
    tracker: Optional[KappaTracker]

    @property
    def env_steps(self) -> int:
        return self.curve[-1]["env_steps"] if self.curve else 0

    def steps_to_return(self, threshold: float) -> Optional[int]:
        """Environment steps at the first evaluation reaching ``threshold``, or None."""
        for row in self.curve:
            if row["eval_return_mean"] >= threshold:
                return row["env_steps"]
        return None


def evaluate_policy(env, agent, episodes: int, rng: np.random.Generator, gamma: float = 1.0,
                    starts: Optional[Sequence] = None) -> EvalReport:
    """Deterministic-mode rollouts in ``env``; returns undiscounted episode sums.

    ``env`` must be a separate instance from the training environment; nothing
    here touches a replay buffer.
    """
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    returns, discounted = [], []
    length = 0
    for k in range(episodes):
        state = env.reset(rng, None if starts is None else starts[k % len(starts)])
        total, disc, weight, t = 0.0, 0.0, 1.0, 0
        done = False
        while not done:
            action = agent.act(state, "deterministic")
            res = env.step(action)
            total += res.reward
            disc += weight * res.reward
            weight *= gamma
            state, done = res.next_state, res.done
            t += 1
        if not math.isfinite(total):
            raise FloatingPointError(f"non-finite return in evaluation episode {k}")
        returns.append(total)
        discounted.append(disc)
        length = t
    return EvalReport(float(np.mean(returns)), returns, length, discounted)


def evaluation_starts(episodes: int, max_phi: float = math.pi) -> np.ndarray:
    """Fixed evaluation start states: angles at the midpoints of ``episodes`` equal cells of
    (-max_phi, max_phi), at rest.  The same set for every seed and epoch keeps curves comparable."""
    width = 2.0 * max_phi / episodes
    phi = -max_phi + width * (np.arange(episodes) + 0.5)
    return np.column_stack([phi, np.zeros(episodes)])


def make_agent(cfg: RunConfig, obs_dim: int, act_dim: int) -> SacAgent:
    sac_cfg = SacConfig(gamma=cfg.discount, tau=cfg.target_smoothing, actor_lr=cfg.actor_learning_rate,
                        critic_lr=cfg.critic_learning_rate, temperature_lr=cfg.temperature_learning_rate,
                        batch_size=cfg.sac_batch_size, target_entropy=cfg.sac_target_entropy,
                        env_data_fraction=cfg.env_data_fraction, hidden_layers=cfg.sac_layers,
                        hidden_size=cfg.sac_width, auto_temperature=cfg.sac_auto_temperature)
    return SacAgent(obs_dim, act_dim, sac_cfg, seed=cfg.seed)


def make_model(cfg: RunConfig, obs_dim: int, act_dim: int) -> EnsembleModel:
    return EnsembleModel(obs_dim, act_dim, ensemble_size=cfg.pnns_per_pe, hidden_layers=cfg.pnn_layers,
                         hidden_size=cfg.pnn_width, seed=cfg.seed)


def _model_train_config(cfg: RunConfig) -> TrainConfig:
    return TrainConfig(batch_size=cfg.model_batch_size, learning_rate=cfg.model_learning_rate,
                       holdout_fraction=cfg.model_holdout_fraction, patience=cfg.model_patience,
                       max_epochs=cfg.model_max_epochs)


def _fit_model(model, d_env, train_cfg, rng):
    """Retrain a learned model; scripted models without a trainer pass through."""
    if isinstance(model, EnsembleModel):
        report = train_ensemble(model, d_env, train_cfg, rng)
        return report.mean_holdout_nll, report.epochs_run
    return math.nan, 0


def _rollout_length(cfg: RunConfig, epoch: int) -> int:
    if cfg.rollout_length_schedule is None:
        return cfg.rollout_length_max
    return linear_schedule(epoch, *cfg.rollout_length_schedule)


def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return repr(float(value))


class _CsvLog:
    def __init__(self, path: Optional[Path], columns):
        self.columns = columns
        self.rows: list[dict] = []
        self.path = path
        if path is not None:
            with open(path, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(columns)

    def append(self, row: dict):
        if set(row) != set(self.columns):
            raise KeyError(f"log row keys {sorted(row)} differ from the declared columns")
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow([_fmt(row[c]) for c in self.columns])


def read_csv(path) -> list[dict]:
    """Read a log written by :func:`run`; numbers come back as int or float."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(path)
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))

    def num(text):
        try:
            return int(text)
        except ValueError:
            return float(text)

    return [{k: num(v) for k, v in row.items()} for row in rows]


def save_checkpoint(directory, cfg: RunConfig, agent: SacAgent, model, d_env: ReplayBuffer) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.yaml").write_text(dump_config(cfg))
    agent.save(directory / "agent.ckpt")
    if isinstance(model, EnsembleModel):
        model.save(directory / "model.ckpt")
    batch = d_env.all()
    save_arrays(directory / "env_buffer.ckpt",
                {"states": batch.states, "actions": batch.actions, "rewards": batch.rewards,
                 "next_states": batch.next_states, "dones": batch.dones},
                {"kind": "replay_buffer", "capacity": d_env.capacity})
    return directory


def load_checkpoint(directory):
    """Returns ``(config, agent, model or None, env buffer)``."""
    from .config import load_config

    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"no checkpoint directory at {directory}")
    cfg = load_config(directory / "config.yaml")
    agent = SacAgent.load(directory / "agent.ckpt") if (directory / "agent.ckpt").exists() else None
    model = EnsembleModel.load(directory / "model.ckpt") if (directory / "model.ckpt").exists() else None
    arrays, meta = load_arrays(directory / "env_buffer.ckpt")
    buf = ReplayBuffer(meta["capacity"], arrays["states"].shape[1], arrays["actions"].shape[1])
    buf.add_batch(arrays["states"], arrays["actions"], arrays["rewards"], arrays["next_states"], arrays["dones"])
    return cfg, agent, model, buf


def run(cfg: RunConfig, out_dir=None, model=None) -> RunResult:
    """Train one agent as configured; see the module docstring for the loop.

    ``model`` overrides the learned ensemble (any object with ``predict``);
    objects that are not an :class:`EnsembleModel` are used as-is, untrained.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.yaml").write_text(dump_config(cfg))

    env_rng, noise_rng, act_rng, model_rng, rollout_rng, batch_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(6))
    env = make_env(cfg.environment, cfg.action_noise, max_torque=cfg.max_torque, max_steps=cfg.episode_length)
    eval_env = make_env(cfg.environment, cfg.action_noise, max_torque=cfg.max_torque, max_steps=cfg.episode_length)
    obs_dim, act_dim = env.observation_dim, env.action_dim

    agent = make_agent(cfg, obs_dim, act_dim)
    if cfg.uses_model and model is None:
        model = make_model(cfg, obs_dim, act_dim)
    train_cfg = _model_train_config(cfg)
    d_env = ReplayBuffer(cfg.env_buffer_capacity, obs_dim, act_dim)
    max_len_cap = (max(cfg.rollout_length_schedule[2:]) if cfg.rollout_length_schedule
                   else cfg.rollout_length_max)
    d_mod = ReplayBuffer(model_buffer_capacity(cfg.rollouts_per_round, max_len_cap, cfg.retain_rounds),
                         obs_dim, act_dim)
    tracker = (KappaTracker(cfg.quantile_factor_zeta, cfg.scaling_factor_xi)
               if cfg.algorithm == "macura" else None)
    noise = NoiseProcess(cfg.exploration, act_dim, horizon=cfg.episode_length, beta=cfg.pink_beta)

    curve = _CsvLog(out / "learning_curve.csv" if out else None, CURVE_COLUMNS)
    rounds = _CsvLog(out / "rounds.csv" if out else None, ROUND_COLUMNS)

    eval_starts = evaluation_starts(cfg.eval_episodes)
    state = env.reset(env_rng)
    noise.reset(noise_rng)
    env_steps, round_idx = 0, 0
    g = 1 if cfg.algorithm == "sac" else (cfg.sac_updates_fixed if cfg.algorithm in ("mbpo", "m2ac") else 0)
    blocks_per_epoch = cfg.steps_per_epoch // cfg.steps_before_retraining

    for epoch in range(1, cfg.epochs + 1):
        epoch_rounds = []
        epoch_updates = 0
        for _ in range(blocks_per_epoch):
            block_g = g
            for _ in range(cfg.steps_before_retraining):
                if env_steps < cfg.initial_random_steps:
                    action = act_rng.uniform(-1.0, 1.0, size=act_dim)
                else:
                    action = agent.act(state, "stochastic", eps=noise.next_epsilon())
                res = env.step(action)
                if not math.isfinite(res.reward):
                    raise FloatingPointError(f"non-finite reward at env step {env_steps}")
                d_env.add(state, action, res.reward, res.next_state, 0.0)
                env_steps += 1
                if res.done:
                    state = env.reset(env_rng)
                    noise.reset(noise_rng)
                else:
                    state = res.next_state
                for _ in range(block_g):
                    if cfg.uses_model:
                        batch = sample_mixed_batch(d_env, d_mod, cfg.sac_batch_size, cfg.env_data_fraction, batch_rng)
                    else:
                        batch = d_env.sample(cfg.sac_batch_size, batch_rng)
                    agent.update(batch)
                epoch_updates += block_g

            row = {"round": round_idx, "epoch": epoch, "env_steps": env_steps, "update_steps": block_g,
                   "max_length": 0, "base_uncertainty": math.nan, "kappa": math.nan, "stored_transitions": 0,
                   "mean_rollout_length": math.nan, "model_holdout_nll": math.nan, "model_epochs": 0}
            if cfg.uses_model:
                nll, model_epochs = _fit_model(model, d_env, train_cfg, model_rng)
                length = _rollout_length(cfg, epoch)
                rcfg = RolloutConfig(cfg.rollouts_per_round, length, cfg.scheduler, cfg.rank_keep_fraction)
                report = rollout_round(model, agent, d_env, d_mod, rcfg, rollout_rng, env.reward_fn, tracker)
                if cfg.algorithm == "macura":
                    g = compute_update_steps(cfg.sac_updates_g_max, len(d_mod), d_mod.capacity)
                row.update(max_length=length, base_uncertainty=report.base_uncertainty, kappa=report.kappa_used,
                           stored_transitions=report.stored_transitions,
                           mean_rollout_length=report.mean_rollout_length, model_holdout_nll=nll,
                           model_epochs=model_epochs)
            rounds.append(row)
            epoch_rounds.append(row)
            round_idx += 1

        ev = evaluate_policy(eval_env, agent, cfg.eval_episodes, np.random.default_rng([cfg.seed, 7919]),
                             starts=eval_starts)
        last = epoch_rounds[-1]
        curve.append({
            "epoch": epoch,
            "env_steps": env_steps,
            "eval_return_mean": ev.mean_return,
            "eval_return_std": ev.std_return,
            "kappa": last["kappa"],
            "base_uncertainty": last["base_uncertainty"],
            "mean_rollout_length": (float(np.mean([r["mean_rollout_length"] for r in epoch_rounds]))
                                    if cfg.uses_model else math.nan),
            "stored_transitions": sum(r["stored_transitions"] for r in epoch_rounds),
            "sac_updates": epoch_updates,
            "model_holdout_nll": last["model_holdout_nll"],
            "temperature": entropy_temperature(agent),
        })
        log.info("%s seed %d epoch %d: steps %d return %.1f updates %d", cfg.algorithm, cfg.seed, epoch, env_steps,
                 ev.mean_return, epoch_updates)
        if out is not None and cfg.checkpoint_every_epochs and epoch % cfg.checkpoint_every_epochs == 0:
            save_checkpoint(out / "checkpoint", cfg, agent, model, d_env)
        if cfg.stop_at_return is not None and ev.mean_return >= cfg.stop_at_return:
            break

    if out is not None:
        save_checkpoint(out / "checkpoint", cfg, agent, model, d_env)
    return RunResult(cfg, out, curve.rows, rounds.rows, agent, model, d_env, tracker)


def run_macura(cfg: RunConfig, out_dir=None, model=None) -> RunResult:
    return run(cfg.replace(algorithm="macura"), out_dir, model)


def run_mbpo(cfg: RunConfig, out_dir=None, model=None) -> RunResult:
    return run(cfg.replace(algorithm="mbpo"), out_dir, model)


def run_sac(cfg: RunConfig, out_dir=None) -> RunResult:
    return run(cfg.replace(algorithm="sac"), out_dir)
