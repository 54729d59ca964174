"""Pendulum system, feedback-linearising controller and RL environment wrappers.

Angles follow the convention that ``phi = 0`` is the *upright* (unstable)
equilibrium, so gravity enters the state equation with a ``+ sin`` term.
Angles are never wrapped or clamped.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

__all__ = [
    "PendulumParams",
    "ControllerParams",
    "NoisyActionConfig",
    "StepResult",
    "TransitionSet",
    "pendulum_derivative",
    "pendulum_mean_step",
    "pendulum_step",
    "fl_controller",
    "reward",
    "generate_spiral_dataset",
    "export_transitions_csv",
    "PendulumEnv",
    "NoisyActionWrapper",
    "noisy_action_wrap",
    "make_env",
]


@dataclass(frozen=True)
class PendulumParams:
    m: float = 0.1
    l: float = 1.0
    g: float = 9.81
    b: float = 0.1
    dt: float = 0.01
    process_noise_var: tuple[float, float] = (1e-6, 1e-3)
    substeps: int = 10

    def __post_init__(self):
        for name in ("m", "l", "g", "dt"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.b < 0:
            raise ValueError("b must be non-negative")
        if any(v < 0 for v in self.process_noise_var):
            raise ValueError("process noise variances must be non-negative")
        if self.substeps < 1:
            raise ValueError("substeps must be >= 1")

    @property
    def inertia(self) -> float:
        return self.m * self.l**2

    @property
    def noise_var(self) -> np.ndarray:
        return np.asarray(self.process_noise_var, dtype=np.float64)


@dataclass(frozen=True)
class ControllerParams:
    k_p: float = 25.0
    k_d: float = 1.0
    phi_d: float = 0.0
    phidot_d: float = 0.0
    phiddot_d: float = 0.0

    def __post_init__(self):
        if self.k_p <= 0 or self.k_d <= 0:
            raise ValueError("controller gains must be positive")


@dataclass(frozen=True)
class NoisyActionConfig:
    sigma: float | tuple[float, ...] = 0.1

    def __post_init__(self):
        if np.any(np.asarray(self.sigma) < 0):
            raise ValueError("sigma must be non-negative")


@dataclass
class StepResult:
    next_state: np.ndarray
    reward: float
    done: bool
    info: dict = field(default_factory=dict)


@dataclass
class TransitionSet:
    """Column-wise transitions (s, a, r, s')."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray

    def __len__(self):
        return len(self.states)


def _check_finite(*arrays):
    for x in arrays:
        if not np.all(np.isfinite(x)):
            raise ValueError("non-finite pendulum input")


def pendulum_derivative(params: PendulumParams, x, torque):
    """State derivative f(x, torque); broadcasts over leading axes."""
    x = np.asarray(x, dtype=np.float64)
    phi, phidot = x[..., 0], x[..., 1]
    phiddot = (torque + params.m * params.g * params.l * np.sin(phi) - params.b * phidot) / params.inertia
    return np.stack([phidot, phiddot], axis=-1)


def pendulum_mean_step(params: PendulumParams, s, a, substeps: Optional[int] = None) -> np.ndarray:
    """Noise-free next state: classic RK4 with the torque held over ``dt``."""
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    _check_finite(s, a)
    torque = a[..., 0] if a.ndim and a.shape[-1:] == (1,) else a
    n = params.substeps if substeps is None else substeps
    h = params.dt / n
    if s.ndim == 1 and np.ndim(torque) == 0:
        return _scalar_rk4(params, float(s[0]), float(s[1]), float(torque), n, h)
    x = s
    for _ in range(n):
        k1 = pendulum_derivative(params, x, torque)
        k2 = pendulum_derivative(params, x + 0.5 * h * k1, torque)
        k3 = pendulum_derivative(params, x + 0.5 * h * k2, torque)
        k4 = pendulum_derivative(params, x + h * k3, torque)
        x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


def _scalar_rk4(params, phi, phidot, torque, n, h):
    # same arithmetic as the array path, on plain floats (single-step hot loop)
    gain = params.m * params.g * params.l
    inertia, b = params.inertia, params.b

    def acc(p, v):
        return (torque + gain * math.sin(p) - b * v) / inertia

    for _ in range(n):
        k1p, k1v = phidot, acc(phi, phidot)
        k2p, k2v = phidot + 0.5 * h * k1v, acc(phi + 0.5 * h * k1p, phidot + 0.5 * h * k1v)
        k3p, k3v = phidot + 0.5 * h * k2v, acc(phi + 0.5 * h * k2p, phidot + 0.5 * h * k2v)
        k4p, k4v = phidot + h * k3v, acc(phi + h * k3p, phidot + h * k3v)
        phi = phi + (h / 6.0) * (k1p + 2 * k2p + 2 * k3p + k4p)
        phidot = phidot + (h / 6.0) * (k1v + 2 * k2v + 2 * k3v + k4v)
    return np.array([phi, phidot])


def reward(s, a):
    """Quadratic upright-stabilisation reward in physical units (torque in N m)."""
    s = np.asarray(s, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    torque = a[..., 0] if a.ndim and a.shape[-1:] == (1,) else a
    return -(s[..., 0] ** 2 + 0.1 * s[..., 1] ** 2 + 0.001 * torque**2)


def pendulum_step(params: PendulumParams, s, a, rng: np.random.Generator) -> StepResult:
    """One noisy transition; never terminates on state."""
    mean = pendulum_mean_step(params, s, a)
    noise = rng.normal(size=mean.shape) * np.sqrt(params.noise_var)
    return StepResult(mean + noise, float(reward(s, a)), False)


def fl_controller(cp: ControllerParams, pp: PendulumParams, s):
    """Feedback-linearising torque driving the pendulum to (phi_d, phidot_d)."""
    s = np.asarray(s, dtype=np.float64)
    phi, phidot = s[..., 0], s[..., 1]
    return (
        pp.inertia * (cp.phiddot_d + cp.k_d * (cp.phidot_d - phidot) + cp.k_p * (cp.phi_d - phi))
        - pp.m * pp.g * pp.l * np.sin(phi)
        + pp.b * phidot
    )


def generate_spiral_dataset(
    params: PendulumParams,
    cp: ControllerParams,
    rng: np.random.Generator,
    n_trajectories: int = 10,
    steps: int = 170,
    start=(3.0, 0.0),
) -> TransitionSet:
    """Closed-loop controller trajectories from a fixed start state."""
    states, actions, rewards, next_states = [], [], [], []
    for _ in range(n_trajectories):
        s = np.asarray(start, dtype=np.float64)
        for _ in range(steps):
            a = np.array([fl_controller(cp, params, s)])
            result = pendulum_step(params, s, a, rng)
            states.append(s)
            actions.append(a)
            rewards.append(result.reward)
            next_states.append(result.next_state)
            s = result.next_state
    return TransitionSet(np.array(states), np.array(actions), np.array(rewards), np.array(next_states))


def export_transitions_csv(path, data: TransitionSet) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["phi", "phidot", "torque", "reward", "phi_next", "phidot_next"])
        for s, a, r, s2 in zip(data.states, data.actions, data.rewards, data.next_states):
            row = [s[0], s[1], a[0], r, s2[0], s2[1]]
            writer.writerow([f"{float(v):.17g}" for v in row])
    return path


class PendulumEnv:
    """Torque-limited noisy pendulum task for the RL agents.

    Agent actions live in [-1, 1] and are scaled to +-``max_torque``.
    Episodes start from phi ~ U(-pi, pi), phidot ~ U(-1, 1) and end after
    ``max_steps`` steps; there are no terminal states.
    """

    observation_dim = 2
    action_dim = 1

    def __init__(self, params: PendulumParams = PendulumParams(), max_torque: float = 5.0, max_steps: int = 200,
                 start_phi: float = math.pi, start_phidot: float = 1.0):
        self.params = params
        self.max_torque = float(max_torque)
        self.max_steps = int(max_steps)
        self.start_phi = float(start_phi)
        self.start_phidot = float(start_phidot)
        self._rng: Optional[np.random.Generator] = None
        self._state: Optional[np.ndarray] = None
        self._t = 0

    @property
    def state(self) -> np.ndarray:
        return self._state.copy()

    def reset(self, rng: np.random.Generator, start=None) -> np.ndarray:
        self._rng = rng
        if start is None:
            start = (rng.uniform(-self.start_phi, self.start_phi), rng.uniform(-self.start_phidot, self.start_phidot))
        self._state = np.asarray(start, dtype=np.float64).copy()
        self._t = 0
        return self.state

    def torque(self, action):
        return self.max_torque * np.asarray(action, dtype=np.float64)

    def reward_fn(self, states, actions):
        """Vectorised reward for agent-space actions, as used in model rollouts."""
        return reward(states, self.torque(actions))

    def step(self, action) -> StepResult:
        if self._state is None:
            raise RuntimeError("reset() must be called before step()")
        action = np.asarray(action, dtype=np.float64).reshape(self.action_dim)
        torque = self.torque(action)
        result = pendulum_step(self.params, self._state, torque, self._rng)
        self._state = result.next_state
        self._t += 1
        result.done = self._t >= self.max_steps
        result.info["applied_action"] = action
        return StepResult(self.state, result.reward, result.done, result.info)


class NoisyActionWrapper:
    """Adds unobserved Gaussian noise to every action before it reaches ``env``.

    Callers keep storing their intended action; the perturbed one is only
    reported in ``info["applied_action"]``.
    """

    def __init__(self, env, cfg: NoisyActionConfig):
        self.env = env
        self.sigma = np.asarray(cfg.sigma, dtype=np.float64)
        self._rng: Optional[np.random.Generator] = None

    def __getattr__(self, name):
        return getattr(self.env, name)

    def reset(self, rng: np.random.Generator, start=None):
        self._rng = rng
        return self.env.reset(rng, start=start)

    def step(self, action) -> StepResult:
        action = np.asarray(action, dtype=np.float64)
        if np.any(self.sigma > 0):
            applied = action + self.sigma * self._rng.normal(size=action.shape)
        else:
            applied = action
        result = self.env.step(applied)
        result.info["intended_action"] = action
        result.info["applied_action"] = applied
        return result


def noisy_action_wrap(env, cfg: NoisyActionConfig):
    return NoisyActionWrapper(env, cfg)


def make_env(env_id: str = "pendulum", action_noise: float = 0.0, **kwargs):
    if env_id != "pendulum":
        raise ValueError(f"unknown environment id: {env_id!r}")
    env = PendulumEnv(**kwargs)
    if action_noise > 0:
        env = NoisyActionWrapper(env, NoisyActionConfig(action_noise))
    return env


RewardFn = Callable[[np.ndarray, np.ndarray], np.ndarray]
