"""Command line entry point.

    macura train --config FILE --seed N --out DIR
    macura eval --checkpoint DIR --episodes K
    macura grid-study --checkpoint DIR --resolution RxC --kappa X
    macura bound-check --checkpoint DIR --kappa X --gamma G --rollouts N
    macura export --run DIR
    macura spiral-model --out DIR

Exit status: 0 on success, 2 for configuration or usage errors, 3 when a
numerical failure (non-finite loss, diverging model) aborts the command.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, dump_config, load_config

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3



def _resolution(text: str) -> tuple[int, int]:
    try:
        rows, cols = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"resolution must look like 100x100, got {text!r}") from None
    return rows, cols


def _kappa(text: str) -> float:
    value = float(text)
    if not value > 0:
        raise argparse.ArgumentTypeError("kappa must be positive")
    return value


def _emit(payload: dict):
    print(json.dumps(payload, sort_keys=True))


def _policy_for(agent, cfg):
    """Learned agent when the checkpoint has one, else the toy controller (torque actions)."""
    from .analysis import agent_policy, controller_policy

    if agent is not None:
        return agent_policy(agent), cfg.max_torque
    return controller_policy(), 1.0


def _load_with_model(directory):
    from .train import load_checkpoint

    cfg, agent, model, buf = load_checkpoint(directory)
    if model is None:
        raise ConfigError(f"checkpoint {directory} has no dynamics model")
    return cfg, agent, model, buf


def cmd_train(args) -> int:
    from .train import run

    cfg = load_config(args.config).replace(seed=args.seed)
    result = run(cfg, args.out)
    last = result.curve[-1]
    _emit({"out": str(args.out), "epochs": len(result.curve), "env_steps": last["env_steps"],
           "eval_return_mean": last["eval_return_mean"]})
    return EXIT_OK


def cmd_eval(args) -> int:
    from .envs import make_env
    from .train import evaluate_policy, evaluation_starts, load_checkpoint

    cfg, agent, _, _ = load_checkpoint(args.checkpoint)
    if agent is None:
        raise ConfigError(f"checkpoint {args.checkpoint} has no agent")
    env = make_env(cfg.environment, cfg.action_noise, max_torque=cfg.max_torque, max_steps=cfg.episode_length)
    report = evaluate_policy(env, agent, args.episodes, np.random.default_rng(args.seed),
                             starts=evaluation_starts(args.episodes))
    _emit({"mean_return": report.mean_return, "returns": report.returns, "episode_length": report.episode_length})
    return EXIT_OK


def cmd_grid_study(args) -> int:
    from .analysis import GridSpec, grid_study
    from .export import GRID_FILE, save_grid_study

    cfg, agent, model, _ = _load_with_model(args.checkpoint)
    policy, scale = _policy_for(agent, cfg)
    study = grid_study(model, policy, spec=GridSpec(resolution=args.resolution), kappa=math.inf,
                       action_scale=scale)
    kappa = args.kappa if args.kappa is not None else float(np.percentile(study.u_gjs, args.kappa_percentile))
    study = study.with_kappa(kappa)
    save_grid_study(Path(args.checkpoint) / GRID_FILE, study)
    inside, outside = study.mean_misalignment()
    _emit({"kappa": kappa, "cells_in_E": int(study.in_E.sum()), "spearman": study.spearman(),
           "mean_d_in_E": inside, "mean_d_outside": outside})
    return EXIT_OK


def cmd_bound_check(args) -> int:
    from .analysis import bound_check

    cfg, agent, model, buf = _load_with_model(args.checkpoint)
    policy, scale = _policy_for(agent, cfg)
    visited = buf.states if agent is not None else None
    rep = bound_check(model, policy, _pendulum(), args.kappa, args.gamma, args.horizon, args.rollouts,
                      np.random.default_rng(args.seed), buf.states, action_scale=scale, visited_states=visited)
    fields = ("eta_hat", "eta_tilde", "delta_p_sup", "C", "holds", "standard_error", "r_max", "reward_shift",
              "max_stopping_time", "mean_stopping_time", "eta_hat_approx", "eta_tilde_approx", "C_approx",
              "holds_approx", "n_rollouts", "start_states_in_E", "delta_p_source")
    _emit({k: getattr(rep, k) for k in fields})
    return EXIT_OK


def _pendulum():
    from .envs import PendulumParams

    return PendulumParams()


def cmd_export(args) -> int:
    from .export import export_artifacts

    files = export_artifacts(args.run)
    _emit({"files": [str(p) for p in files]})
    return EXIT_OK


def cmd_spiral_model(args) -> int:
    from .analysis import fit_spiral_model
    from .checkpoint import save_arrays

    model, data, report = fit_spiral_model(args.seed, patience=args.patience)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = RunConfig(pnns_per_pe=model.ensemble_size, pnn_layers=model.hidden_layers, pnn_width=model.hidden_size,
                    model_patience=args.patience, seed=args.seed)
    (out / "config.yaml").write_text(dump_config(cfg))
    model.save(out / "model.ckpt")
    save_arrays(out / "env_buffer.ckpt",
                {"states": data.states, "actions": data.actions, "rewards": data.rewards,
                 "next_states": data.next_states, "dones": np.zeros(len(data))},
                {"kind": "replay_buffer", "capacity": len(data)})
    _emit({"out": str(out), "transitions": len(data), "epochs": report.epochs_run,
           "holdout_nll": report.mean_holdout_nll})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="macura", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train an agent from a config file")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpointed agent")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grid-study", help="uncertainty vs. true misalignment over a state grid")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--resolution", type=_resolution, default=(100, 100))
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--kappa", type=_kappa)
    group.add_argument("--kappa-percentile", type=float, help="kappa at this percentile of the grid uncertainty")
    p.set_defaults(func=cmd_grid_study)

    p = sub.add_parser("bound-check", help="coupled-rollout check of the return-gap bound")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--kappa", required=True, type=_kappa)
    p.add_argument("--gamma", type=float, default=0.99)
    p.add_argument("--rollouts", type=int, default=200)
    p.add_argument("--horizon", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bound_check)

    p = sub.add_parser("export", help="write CSV tables and SVG heat maps for a run")
    p.add_argument("--run", required=True, type=Path)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("spiral-model", help="fit an ensemble to controller spiral data (toy checkpoint)")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patience", type=int, default=20)
    p.set_defaults(func=cmd_spiral_model)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
