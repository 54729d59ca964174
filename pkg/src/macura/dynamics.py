"""Probabilistic ensemble of Gaussian-head MLPs for learned dynamics.

All E members live in one module: every weight tensor carries a leading
member axis, so a forward pass over the whole ensemble is a handful of
batched matmuls.  Members regress the normalised state change ``s' - s``
and predict a log-variance that is softly kept inside learned bounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .checkpoint import load_arrays, save_arrays
from .gaussian import DiagGaussian, EnsemblePrediction
from .nets import EnsembleLinear

__all__ = [
    "EnsembleModel",
    "TrainConfig",
    "TrainReport",
    "DivergenceError",
    "gaussian_nll",
    "nll_loss",
    "pnn_forward",
    "predict_ensemble",
    "sample_next",
    "train_ensemble",
    "constant_predictor_nll",
]

STD_FLOOR = 1e-8
LOG_2PI = math.log(2.0 * math.pi)


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, member: int, message: str = ""):
        self.member = member
        super().__init__(message or f"ensemble member {member} diverged (non-finite loss)")


class EnsembleModel(nn.Module):
    """E probabilistic networks sharing architecture and normalisation."""

    def __init__(
        self,
        obs_dim: int,
        act_dim: int,
        ensemble_size: int = 7,
        hidden_layers: int = 4,
        hidden_size: int = 64,
        predict_delta: bool = True,
        dtype: torch.dtype = torch.float32,
        seed: int = 0,
        init_logvar_bounds: tuple[float, float] = (-10.0, 0.5),
    ):
        super().__init__()
        if ensemble_size < 1 or hidden_layers < 1 or hidden_size < 1:
            raise ValueError("ensemble size, depth and width must be positive")
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.ensemble_size = ensemble_size
        self.hidden_layers = hidden_layers
        self.hidden_size = hidden_size
        self.predict_delta = predict_delta
        self.dtype = dtype
        self.seed = int(seed)
        sizes = [obs_dim + act_dim] + [hidden_size] * hidden_layers
        self.layers = nn.ModuleList(EnsembleLinear(ensemble_size, a, b, dtype) for a, b in zip(sizes[:-1], sizes[1:]))
        self.head = EnsembleLinear(ensemble_size, hidden_size, 2 * obs_dim, dtype)
        lo, hi = init_logvar_bounds
        self.min_logvar = nn.Parameter(torch.full((ensemble_size, 1, obs_dim), float(lo), dtype=dtype))
        self.max_logvar = nn.Parameter(torch.full((ensemble_size, 1, obs_dim), float(hi), dtype=dtype))
        n_in = obs_dim + act_dim
        self.register_buffer("in_mean", torch.zeros(n_in, dtype=dtype))
        self.register_buffer("in_std", torch.ones(n_in, dtype=dtype))
        self.register_buffer("out_mean", torch.zeros(obs_dim, dtype=dtype))
        self.register_buffer("out_std", torch.ones(obs_dim, dtype=dtype))
        self.fitted = False
        gen = torch.Generator().manual_seed(self.seed)
        for layer in [*self.layers, self.head]:
            layer.reset_parameters(gen)

    # -- normalisation -------------------------------------------------
    def fit_normalizer(self, inputs: np.ndarray, targets: np.ndarray) -> None:
        def stats(x):
            x = np.asarray(x, dtype=np.float64)
            return x.mean(axis=0), np.maximum(x.std(axis=0), STD_FLOOR)

        for (mean, std), (mname, sname) in zip(
            (stats(inputs), stats(targets)), (("in_mean", "in_std"), ("out_mean", "out_std"))
        ):
            getattr(self, mname).copy_(torch.as_tensor(mean, dtype=self.dtype))
            getattr(self, sname).copy_(torch.as_tensor(std, dtype=self.dtype))
        self.fitted = True

    def set_identity_normalizer(self) -> None:
        for name, value in (("in_mean", 0.0), ("in_std", 1.0), ("out_mean", 0.0), ("out_std", 1.0)):
            getattr(self, name).fill_(value)
        self.fitted = True

    def normalize_inputs(self, x):
        return (x - self.in_mean) / self.in_std

    def denormalize_inputs(self, x):
        return x * self.in_std + self.in_mean

    def targets_from(self, states, next_states):
        return next_states - states if self.predict_delta else next_states

    # -- forward --------------------------------------------------------
    def bound_logvar(self, raw):
        logvar = self.max_logvar - F.softplus(self.max_logvar - raw)
        logvar = self.min_logvar + F.softplus(logvar - self.min_logvar)
        # softplus rounding can step a hair outside; keep the bounds exact
        return torch.maximum(torch.minimum(logvar, self.max_logvar), self.min_logvar)

    def forward(self, x_norm):
        """Normalised inputs ``(E, N, in)`` -> normalised mean and log-variance ``(E, N, d)``."""
        h = x_norm
        for layer in self.layers:
            h = F.silu(layer(h))
        out = self.head(h)
        mean, raw = out[..., : self.obs_dim], out[..., self.obs_dim:]
        return mean, self.bound_logvar(raw)

    def _inputs(self, states, actions):
        s = torch.as_tensor(np.asarray(states, dtype=np.float64), dtype=self.dtype)
        a = torch.as_tensor(np.asarray(actions, dtype=np.float64), dtype=self.dtype)
        return s, torch.cat([s, a], dim=-1)

    def predict(self, states, actions, members: Optional[Sequence[int]] = None) -> tuple[np.ndarray, np.ndarray]:
        """Raw-coordinate next-state means and variances, shape ``(E, N, d)`` (float64)."""
        if not self.fitted:
            raise RuntimeError("model normalizer not fitted; train the model first")
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        if not (np.all(np.isfinite(states)) and np.all(np.isfinite(actions))):
            raise ValueError("non-finite model input")
        s, x = self._inputs(states, actions)
        with torch.no_grad():
            x_norm = self.normalize_inputs(x).expand(self.ensemble_size, *x.shape)
            mean, logvar = self(x_norm)
            if members is not None:
                idx = torch.as_tensor(list(members))
                mean, logvar = mean[idx], logvar[idx]
            mean = mean * self.out_std + self.out_mean
            var = torch.exp(logvar) * self.out_std**2
        mean = mean.double().numpy()
        var = var.double().numpy()
        if self.predict_delta:
            mean = mean + states
        return mean, var

    def variance_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-member raw-coordinate variance range ``(E, d)``."""
        with torch.no_grad():
            scale = self.out_std**2
            lo = torch.exp(self.min_logvar[:, 0]) * scale
            hi = torch.exp(self.max_logvar[:, 0]) * scale
        return lo.double().numpy(), hi.double().numpy()

    # -- persistence ----------------------------------------------------
    def config_dict(self) -> dict:
        return {
            "obs_dim": self.obs_dim,
            "act_dim": self.act_dim,
            "ensemble_size": self.ensemble_size,
            "hidden_layers": self.hidden_layers,
            "hidden_size": self.hidden_size,
            "predict_delta": self.predict_delta,
            "dtype": str(self.dtype).removeprefix("torch."),
            "seed": self.seed,
        }

    def state_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {prefix + k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}

    def save(self, path):
        return save_arrays(path, self.state_arrays(), {"kind": "ensemble_model", "config": self.config_dict(),
                                                       "fitted": self.fitted})

    @classmethod
    def from_arrays(cls, arrays: dict, config: dict, fitted: bool = True, prefix: str = "") -> "EnsembleModel":
        config = dict(config)
        config["dtype"] = getattr(torch, config["dtype"])
        model = cls(**config)
        model.load_state_dict({k[len(prefix):]: torch.from_numpy(v) for k, v in arrays.items() if k.startswith(prefix)})
        model.fitted = fitted
        return model

    @classmethod
    def load(cls, path) -> "EnsembleModel":
        arrays, meta = load_arrays(path)
        if meta.get("kind") != "ensemble_model":
            raise ValueError("checkpoint does not hold an ensemble model")
        return cls.from_arrays(arrays, meta["config"], meta.get("fitted", True))


def gaussian_nll(mean, logvar, target):
    """Per-sample Gaussian NLL summed over the last axis (torch, differentiable)."""
    return 0.5 * torch.sum((target - mean) ** 2 * torch.exp(-logvar) + logvar + LOG_2PI, dim=-1)


def nll_loss(pred: DiagGaussian, target) -> float:
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.mean.shape:
        raise ValueError(f"target shape {target.shape} does not match prediction {pred.mean.shape}")
    return float(0.5 * np.sum((target - pred.mean) ** 2 / pred.var + np.log(pred.var) + LOG_2PI))


def pnn_forward(model: EnsembleModel, member: int, s, a) -> DiagGaussian:
    if not 0 <= member < model.ensemble_size:
        raise IndexError(f"member {member} out of range for ensemble of size {model.ensemble_size}")
    mean, var = model.predict(np.asarray(s)[None], np.asarray(a)[None], members=[member])
    return DiagGaussian(mean[0, 0], var[0, 0])


def predict_ensemble(model: EnsembleModel, s, a) -> EnsemblePrediction:
    mean, var = model.predict(np.asarray(s)[None], np.asarray(a)[None])
    return EnsemblePrediction.from_arrays(mean[:, 0], var[:, 0])


def sample_next(model: EnsembleModel, member: int, s, a, rng: np.random.Generator) -> np.ndarray:
    """Draw s' from one member; ``s``/``a`` may be single vectors or ``(N, .)`` batches."""
    if not 0 <= member < model.ensemble_size:
        raise IndexError(f"member {member} out of range for ensemble of size {model.ensemble_size}")
    s = np.asarray(s, dtype=np.float64)
    mean, var = model.predict(np.atleast_2d(s), np.atleast_2d(a), members=[member])
    draw = mean[0] + np.sqrt(var[0]) * rng.standard_normal(mean[0].shape)
    return draw[0] if s.ndim == 1 else draw


@dataclass
class TrainConfig:
    batch_size: int = 256
    learning_rate: float = 1e-3
    weight_decay: Sequence[float] = (2.5e-5, 5e-5, 7.5e-5, 7.5e-5, 1e-4)
    holdout_fraction: float = 0.1
    max_holdout: int = 5000
    patience: int = 5
    max_epochs: Optional[int] = None
    min_train_size: int = 10
    improvement_threshold: float = 0.01
    logvar_bound_penalty: float = 0.01

    def __post_init__(self):
        if not 0 < self.holdout_fraction < 1:
            raise ValueError("holdout_fraction must be in (0, 1)")
        if self.patience < 0:
            raise ValueError("patience must be non-negative")


@dataclass
class TrainReport:
    epochs_run: int
    holdout_nll_per_member: list[float]
    improved: bool
    train_losses: list[float] = field(default_factory=list)

    @property
    def mean_holdout_nll(self) -> float:
        return float(np.mean(self.holdout_nll_per_member))


def _as_arrays(data):
    if hasattr(data, "states"):
        return np.asarray(data.states), np.asarray(data.actions), np.asarray(data.next_states)
    states, actions, next_states = data
    return np.asarray(states), np.asarray(actions), np.asarray(next_states)


def _optimizer(model: EnsembleModel, cfg: TrainConfig):
    layers = [*model.layers, model.head]
    decay = list(cfg.weight_decay)
    if len(decay) < len(layers):
        decay = decay[:-1] + [decay[-1]] * (len(layers) - len(decay) + 1)
    groups = [{"params": list(layer.parameters()), "weight_decay": wd} for layer, wd in zip(layers, decay)]
    groups.append({"params": [model.min_logvar, model.max_logvar], "weight_decay": 0.0})
    return torch.optim.Adam(groups, lr=cfg.learning_rate)


def _holdout_nll(model, x_norm, t_norm):
    """Per-member mean NLL in raw target units."""
    with torch.no_grad():
        mean, logvar = model(x_norm.expand(model.ensemble_size, *x_norm.shape))
        nll = gaussian_nll(mean, logvar, t_norm).mean(dim=1)
        nll = nll + torch.log(model.out_std).sum()
    return nll.double().numpy()


def constant_predictor_nll(train_targets, holdout_targets) -> float:
    """Holdout NLL of the best input-independent Gaussian fitted on the training targets."""
    mu = np.mean(train_targets, axis=0)
    var = np.maximum(np.var(train_targets, axis=0), STD_FLOOR**2)
    return float(np.mean(0.5 * np.sum((holdout_targets - mu) ** 2 / var + np.log(var) + LOG_2PI, axis=1)))


def train_ensemble(model: EnsembleModel, data, config: TrainConfig, rng: np.random.Generator) -> TrainReport:
    """Bootstrap-train every member with early stopping on a shared holdout split.

    ``data`` is a :class:`~macura.envs.TransitionSet`, a replay buffer view
    with ``states/actions/next_states`` attributes, or a tuple of arrays.
    """
    states, actions, next_states = _as_arrays(data)
    n = len(states)
    if n < config.min_train_size:
        raise ValueError(f"need at least {config.min_train_size} transitions to train, got {n}")
    n_hold = min(max(1, int(round(n * config.holdout_fraction))), config.max_holdout)
    perm = rng.permutation(n)
    hold, train = perm[:n_hold], perm[n_hold:]
    inputs = np.concatenate([states, actions], axis=1)
    targets = model.targets_from(states, next_states)
    model.fit_normalizer(inputs[train], targets[train])

    def to_norm(idx):
        x = torch.as_tensor(inputs[idx], dtype=model.dtype)
        t = torch.as_tensor(targets[idx], dtype=model.dtype)
        return model.normalize_inputs(x), (t - model.out_mean) / model.out_std

    x_train, t_train = to_norm(train)
    x_hold, t_hold = to_norm(hold)
    n_train = len(train)
    E = model.ensemble_size
    boot = rng.integers(0, n_train, size=(E, n_train))
    opt = _optimizer(model, config)
    params = list(model.parameters())

    best = _holdout_nll(model, x_hold, t_hold)
    initial = best.copy()
    best_params = [p.detach().clone() for p in params]
    epochs, stale = 0, 0
    train_losses = []
    while config.max_epochs is None or epochs < config.max_epochs:
        order = rng.permuted(boot, axis=1)
        epoch_loss = 0.0
        for lo in range(0, n_train, config.batch_size):
            idx = torch.as_tensor(order[:, lo:lo + config.batch_size])
            mean, logvar = model(x_train[idx])
            per_member = gaussian_nll(mean, logvar, t_train[idx]).mean(dim=1)
            if not torch.all(torch.isfinite(per_member)):
                bad = int(torch.nonzero(~torch.isfinite(per_member))[0, 0])
                raise DivergenceError(bad)
            bound_pen = config.logvar_bound_penalty * (model.max_logvar.sum() - model.min_logvar.sum())
            loss = per_member.sum() + bound_pen
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += float(per_member.detach().sum())
        epochs += 1
        train_losses.append(epoch_loss)
        score = _holdout_nll(model, x_hold, t_hold)
        if not np.all(np.isfinite(score)):
            raise DivergenceError(int(np.flatnonzero(~np.isfinite(score))[0]))
        gain = (best - score) / np.maximum(np.abs(best), 1e-12)
        better = gain > config.improvement_threshold
        if better.any():
            with torch.no_grad():
                for saved, p in zip(best_params, params):
                    saved[better] = p[better]
            best = np.where(better, score, best)
            stale = 0
        else:
            stale += 1
        if stale >= config.patience:
            break

    with torch.no_grad():
        for saved, p in zip(best_params, params):
            p.copy_(saved)
    final = _holdout_nll(model, x_hold, t_hold)
    return TrainReport(epochs, [float(v) for v in final], bool(np.any(final < initial)), train_losses)
