"""Soft actor-critic with a tanh-squashed Gaussian policy and twin critics.

The two critics (and their targets) are stored as a 2-member
:class:`~macura.nets.EnsembleLinear` stack so both are evaluated in one
batched pass.  Loss functions take their reparameterisation noise as an
argument, which keeps them deterministic for finite-difference checks.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .checkpoint import load_arrays, save_arrays
from .nets import EnsembleLinear

__all__ = [
    "SacConfig",
    "Batch",
    "UpdateReport",
    "NonFiniteLossError",
    "SacAgent",
    "squashed_log_prob",
    "entropy_temperature",
]

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
FIXED_TEMPERATURE = 0.2
_OPEN_ONE = np.nextafter(1.0, 0.0)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, component: str):
        self.component = component
        super().__init__(f"non-finite {component} loss")


@dataclass(frozen=True)
class SacConfig:
    gamma: float = 0.99
    tau: float = 0.005
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    temperature_lr: float = 3e-4
    batch_size: int = 256
    target_entropy: float = -1.0
    env_data_fraction: float = 0.05
    hidden_layers: int = 2
    hidden_size: int = 128
    auto_temperature: bool = True
    initial_temperature: float = FIXED_TEMPERATURE

    def __post_init__(self):
        if not 0 <= self.gamma < 1:
            raise ValueError("gamma must lie in [0, 1)")
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if not 0 <= self.env_data_fraction <= 1:
            raise ValueError("env_data_fraction must lie in [0, 1]")
        if self.initial_temperature <= 0:
            raise ValueError("initial_temperature must be positive")


@dataclass
class Batch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray

    def __len__(self):
        return len(self.states)


@dataclass
class UpdateReport:
    critic_loss: float
    actor_loss: float
    temperature_loss: float
    entropy: float
    temperature: float


def squashed_log_prob(pre_tanh, mean, log_std):
    """log density of ``tanh(u)`` for ``u ~ N(mean, exp(log_std)^2)``, summed over action dims."""
    gauss = -0.5 * ((pre_tanh - mean) / torch.exp(log_std)) ** 2 - log_std - 0.5 * math.log(2 * math.pi)
    # log(1 - tanh(u)^2) = 2 (log 2 - u - softplus(-2u)), stable for large |u|
    jac = 2.0 * (math.log(2.0) - pre_tanh - F.softplus(-2.0 * pre_tanh))
    return torch.sum(gauss - jac, dim=-1)


class _Stack(nn.Module):
    """MLP evaluated for ``members`` parameter sets at once."""

    def __init__(self, members, sizes, dtype, generator):
        super().__init__()
        self.layers = nn.ModuleList(EnsembleLinear(members, a, b, dtype) for a, b in zip(sizes[:-1], sizes[1:]))
        for layer in self.layers:
            layer.reset_parameters(generator, scheme="uniform")

    def forward(self, x):
        for layer in self.layers[:-1]:
            x = F.relu(layer(x))
        return self.layers[-1](x)


class SacAgent(nn.Module):
    def __init__(self, obs_dim: int, act_dim: int, config: SacConfig = SacConfig(), seed: int = 0,
                 dtype: torch.dtype = torch.float32):
        super().__init__()
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.config = config
        self.seed = int(seed)
        self.dtype = dtype
        gen = torch.Generator().manual_seed(self.seed)
        hidden = [config.hidden_size] * config.hidden_layers
        self.actor = _Stack(1, [obs_dim, *hidden, 2 * act_dim], dtype, gen)
        self.critic = _Stack(2, [obs_dim + act_dim, *hidden, 1], dtype, gen)
        self.target = _Stack(2, [obs_dim + act_dim, *hidden, 1], dtype, gen)
        self.target.load_state_dict(self.critic.state_dict())
        self.target.requires_grad_(False)
        self.log_temperature = nn.Parameter(
            torch.tensor(math.log(config.initial_temperature), dtype=dtype), requires_grad=config.auto_temperature
        )
        self.actor_opt = torch.optim.Adam(self.actor.parameters(), lr=config.actor_lr)
        self.critic_opt = torch.optim.Adam(self.critic.parameters(), lr=config.critic_lr)
        self.temperature_opt = (
            torch.optim.Adam([self.log_temperature], lr=config.temperature_lr) if config.auto_temperature else None
        )
        self._noise = torch.Generator().manual_seed(self.seed + 1)
        self.updates = 0

    # -- networks -------------------------------------------------------
    def policy(self, states):
        out = self.actor(states.unsqueeze(0))[0]
        mean, log_std = out[..., : self.act_dim], out[..., self.act_dim:]
        return mean, torch.clamp(log_std, LOG_STD_MIN, LOG_STD_MAX)

    def q_values(self, states, actions, target: bool = False):
        x = torch.cat([states, actions], dim=-1).unsqueeze(0).expand(2, *states.shape[:-1], -1)
        net = self.target if target else self.critic
        return net(x)[..., 0]

    def sample_with_noise(self, states, noise):
        mean, log_std = self.policy(states)
        pre = mean + torch.exp(log_std) * noise
        return torch.tanh(pre), squashed_log_prob(pre, mean, log_std)

    @property
    def temperature(self):
        return torch.exp(self.log_temperature)

    # -- acting ---------------------------------------------------------
    def act(self, state, mode: str = "stochastic", rng: Optional[np.random.Generator] = None,
            eps: Optional[np.ndarray] = None) -> np.ndarray:
        """Action in (-1, 1) for one state or a batch.

        ``mode='deterministic'`` returns ``tanh(mean)``.  Stochastic actions
        use ``eps`` when given (e.g. from a noise process), else draw it from
        ``rng``.
        """
        state = np.asarray(state, dtype=np.float64)
        if not np.all(np.isfinite(state)):
            raise ValueError("non-finite state")
        single = state.ndim == 1
        s = torch.as_tensor(np.atleast_2d(state), dtype=self.dtype)
        with torch.no_grad():
            mean, log_std = self.policy(s)
        mean = mean.double().numpy()
        std = np.exp(log_std.double().numpy())
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(std))):
            raise FloatingPointError("non-finite policy output")
        if mode == "deterministic":
            pre = mean
        elif mode == "stochastic":
            if eps is None:
                if rng is None:
                    raise ValueError("stochastic mode needs rng or eps")
                eps = rng.standard_normal(mean.shape)
            pre = mean + std * np.broadcast_to(eps, mean.shape)
        else:
            raise ValueError(f"unknown mode {mode!r}")
        # tanh saturates to +-1 in float64 for |pre| > ~19; keep the range open
        action = np.clip(np.tanh(pre), -_OPEN_ONE, _OPEN_ONE)
        return action[0] if single else action

    def sample_actions(self, states, rng: np.random.Generator) -> np.ndarray:
        return self.act(np.atleast_2d(states), "stochastic", rng)

    # -- losses ---------------------------------------------------------
    def _tensors(self, batch: Batch):
        t = lambda x: torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=self.dtype)  # noqa: E731
        return (t(batch.states), t(batch.actions), t(batch.rewards).reshape(-1),
                t(batch.next_states), t(batch.dones).reshape(-1))

    def critic_target(self, batch: Batch, next_noise):
        _, _, r, s2, done = self._tensors(batch)
        with torch.no_grad():
            a2, logp2 = self.sample_with_noise(s2, next_noise)
            q_next = self.q_values(s2, a2, target=True).min(dim=0).values
            soft = q_next - self.temperature.detach() * logp2
            return r + self.config.gamma * (1.0 - done) * soft

    def critic_loss(self, batch: Batch, next_noise):
        s, a, *_ = self._tensors(batch)
        y = self.critic_target(batch, next_noise)
        q = self.q_values(s, a)
        return ((q - y) ** 2).mean(dim=1).sum()

    def actor_loss(self, states, noise):
        action, logp = self.sample_with_noise(states, noise)
        q = self.q_values(states, action).min(dim=0).values
        return (self.temperature.detach() * logp - q).mean(), logp

    def temperature_loss(self, logp):
        return -(self.log_temperature * (logp.detach() + self.config.target_entropy)).mean()

    # -- update ---------------------------------------------------------
    def _draw(self, n):
        return torch.randn(n, self.act_dim, generator=self._noise, dtype=self.dtype)

    def update(self, batch: Batch) -> UpdateReport:
        n = len(batch)
        c_loss = self.critic_loss(batch, self._draw(n))
        if not torch.isfinite(c_loss):
            raise NonFiniteLossError("critic")
        self.critic_opt.zero_grad()
        c_loss.backward()
        self.critic_opt.step()

        states = self._tensors(batch)[0]
        self.critic.requires_grad_(False)
        a_loss, logp = self.actor_loss(states, self._draw(n))
        if not torch.isfinite(a_loss):
            self.critic.requires_grad_(True)
            raise NonFiniteLossError("actor")
        self.actor_opt.zero_grad()
        a_loss.backward()
        self.actor_opt.step()
        self.critic.requires_grad_(True)

        t_loss = self.temperature_loss(logp)
        if not torch.isfinite(t_loss):
            raise NonFiniteLossError("temperature")
        if self.temperature_opt is not None:
            self.temperature_opt.zero_grad()
            t_loss.backward()
            self.temperature_opt.step()

        with torch.no_grad():
            torch._foreach_lerp_(list(self.target.parameters()), list(self.critic.parameters()), self.config.tau)
        self.updates += 1
        return UpdateReport(float(c_loss.detach()), float(a_loss.detach()), float(t_loss.detach()), float(-logp.detach().mean()),
                            entropy_temperature(self))

    # -- persistence ----------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}

    def save(self, path):
        meta = {"kind": "sac_agent", "obs_dim": self.obs_dim, "act_dim": self.act_dim, "seed": self.seed,
                "dtype": str(self.dtype).removeprefix("torch."), "config": asdict(self.config), "updates": self.updates}
        return save_arrays(path, self.state_arrays(), meta)

    @classmethod
    def load(cls, path) -> "SacAgent":
        arrays, meta = load_arrays(path)
        if meta.get("kind") != "sac_agent":
            raise ValueError("checkpoint does not hold a SAC agent")
        agent = cls(meta["obs_dim"], meta["act_dim"], SacConfig(**meta["config"]), meta["seed"],
                    getattr(torch, meta["dtype"]))
        agent.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
        agent.updates = meta["updates"]
        return agent


def entropy_temperature(agent: SacAgent) -> float:
    return float(torch.exp(agent.log_temperature.detach()))
