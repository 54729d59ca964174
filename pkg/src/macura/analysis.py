"""Model-accuracy diagnostics on the pendulum where the true kernel is known.

``grid_study`` compares ensemble disagreement with the actual distance of
each member from the true next-state distribution over a uniform state
grid.  ``bound_check`` runs coupled real/model rollouts from the same start
states, stops them when either leaves the low-uncertainty set, and compares
the return gap with the accumulated-misalignment bound.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .dynamics import EnsembleModel, TrainConfig, TrainReport, train_ensemble
from .envs import (ControllerParams, PendulumParams, TransitionSet, fl_controller, generate_spiral_dataset,
                   pendulum_mean_step, reward)
from .gaussian import hellinger_arrays, u_gjs_arrays

__all__ = [
    "PHI_LIMITS",
    "PHIDOT_LIMITS",
    "GridSpec",
    "GridStudy",
    "BoundReport",
    "TrueKernelModel",
    "controller_policy",
    "agent_policy",
    "misalignment",
    "grid_study",
    "bound_check",
    "discount_weights",
    "bound_constant",
    "fit_spiral_model",
]

PHI_LIMITS = (-3.0, 3.0)
PHIDOT_LIMITS = (-16.0, 16.0)
REWARD_FLOOR = 1e-3  # smallest shifted reward

Policy = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class GridSpec:
    phi_range: tuple[float, float] = PHI_LIMITS
    phidot_range: tuple[float, float] = PHIDOT_LIMITS
    resolution: tuple[int, int] = (100, 100)

    def __post_init__(self):
        for (lo, hi), (lim_lo, lim_hi), name in ((self.phi_range, PHI_LIMITS, "phi"),
                                                 (self.phidot_range, PHIDOT_LIMITS, "phidot")):
            if not lim_lo <= lo < hi <= lim_hi:
                raise ValueError(f"{name} range {(lo, hi)} must be increasing and inside {(lim_lo, lim_hi)}")
        rows, cols = self.resolution
        if rows < 1 or cols < 1:
            raise ValueError("grid resolution must be >= 1 in both directions")

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(int(v) for v in self.resolution)

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        rows, cols = self.shape
        return np.linspace(*self.phi_range, rows), np.linspace(*self.phidot_range, cols)

    def states(self) -> np.ndarray:
        """Cell states in row-major order: rows follow phi, columns phidot."""
        phi, phidot = self.axes()
        p, v = np.meshgrid(phi, phidot, indexing="ij")
        return np.stack([p.ravel(), v.ravel()], axis=1)


@dataclass
class GridStudy:
    spec: GridSpec
    u_gjs: np.ndarray
    d: np.ndarray
    in_E: np.ndarray
    kappa: float

    def __post_init__(self):
        for name in ("u_gjs", "d", "in_E"):
            if np.shape(getattr(self, name)) != self.spec.shape:
                raise ValueError(f"{name} has shape {np.shape(getattr(self, name))}, grid is {self.spec.shape}")

    def with_kappa(self, kappa: float) -> "GridStudy":
        return replace(self, in_E=self.u_gjs < kappa, kappa=float(kappa))

    def spearman(self) -> float:
        from scipy.stats import spearmanr

        return float(spearmanr(self.u_gjs.ravel(), self.d.ravel()).statistic)

    def mean_misalignment(self) -> tuple[float, float]:
        """Mean d inside the low-uncertainty set and on its complement (nan when empty)."""
        inside, outside = self.d[self.in_E], self.d[~self.in_E]
        return (float(inside.mean()) if inside.size else math.nan,
                float(outside.mean()) if outside.size else math.nan)


@dataclass
class BoundReport:
    eta_hat: float
    eta_tilde: float
    delta_p_sup: float
    C: float
    holds: bool
    standard_error: float
    r_max: float
    reward_shift: float
    max_stopping_time: int
    mean_stopping_time: float
    eta_hat_approx: float
    eta_tilde_approx: float
    C_approx: float
    holds_approx: bool
    n_rollouts: int
    start_states_in_E: int
    delta_p_source: str
    stopping_times: np.ndarray = field(repr=False, default=None)
    approx_stopping_times: np.ndarray = field(repr=False, default=None)

    @property
    def gap(self) -> float:
        return abs(self.eta_hat - self.eta_tilde)

    @property
    def margin(self) -> float:
        return 3.0 * self.standard_error


class TrueKernelModel:
    """Ensemble whose members all equal the true transition kernel (optionally biased).

    ``action_scale`` converts model actions to torque.  ``mean_bias`` is added
    to every member's mean, giving a deliberately corrupted but confident model.
    """

    def __init__(self, params: PendulumParams = PendulumParams(), members: int = 5, action_scale: float = 1.0,
                 mean_bias=(0.0, 0.0)):
        self.params = params
        self.members = members
        self.action_scale = float(action_scale)
        self.mean_bias = np.asarray(mean_bias, dtype=np.float64)

    def predict(self, states, actions):
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        torque = self.action_scale * np.asarray(actions, dtype=np.float64).reshape(len(states))
        mean = pendulum_mean_step(self.params, states, torque) + self.mean_bias
        means = np.broadcast_to(mean, (self.members,) + mean.shape).copy()
        return means, np.broadcast_to(self.params.noise_var, means.shape).copy()


def fit_spiral_model(seed: int = 0, ensemble_size: int = 7, hidden_layers: int = 4, hidden_size: int = 64,
                     patience: int = 20) -> tuple[EnsembleModel, TransitionSet, TrainReport]:
    """Controller-driven spiral data from the default pendulum and an ensemble fitted to it."""
    data_rng, train_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    data = generate_spiral_dataset(PendulumParams(), ControllerParams(), data_rng)
    model = EnsembleModel(2, 1, ensemble_size, hidden_layers, hidden_size, seed=seed)
    report = train_ensemble(model, data, TrainConfig(patience=patience), train_rng)
    return model, data, report


def controller_policy(cp: ControllerParams = ControllerParams(), pp: PendulumParams = PendulumParams()) -> Policy:
    """Feedback-linearising controller as a batched policy returning torque of shape (N, 1)."""
    return lambda states: fl_controller(cp, pp, states).reshape(-1, 1)


def agent_policy(agent) -> Policy:
    return lambda states: agent.act(np.atleast_2d(states), "deterministic")


def _predict(model, states, actions):
    means, variances = model.predict(states, actions)
    means, variances = np.asarray(means, dtype=np.float64), np.asarray(variances, dtype=np.float64)
    if not (np.all(np.isfinite(means)) and np.all(np.isfinite(variances))):
        raise FloatingPointError("model produced non-finite predictions")
    return means, variances


def misalignment(means, variances, true_mean, true_var) -> np.ndarray:
    """Mean over members of sqrt(2) * Hellinger distance to the true kernel."""
    return math.sqrt(2.0) * hellinger_arrays(means, variances, true_mean[None], true_var).mean(axis=0)


def _true_kernel(params, states, actions, action_scale):
    torque = action_scale * np.asarray(actions, dtype=np.float64).reshape(len(states))
    return pendulum_mean_step(params, states, torque), np.broadcast_to(params.noise_var, states.shape)


def _uncertainty_and_misalignment(model, policy, params, states, action_scale):
    actions = policy(states)
    means, variances = _predict(model, states, actions)
    true_mean, true_var = _true_kernel(params, states, actions, action_scale)
    return u_gjs_arrays(means, variances), misalignment(means, variances, true_mean, true_var), actions


def grid_study(model, policy: Policy, params: PendulumParams = PendulumParams(), spec: GridSpec = GridSpec(),
               kappa: float = math.inf, action_scale: float = 1.0) -> GridStudy:
    """Per-cell ensemble disagreement, true misalignment and membership ``u_gjs < kappa``.

    ``policy`` maps states (N, 2) to model actions (N, act_dim);
    ``action_scale`` converts those to torque for the true kernel.
    """
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    u, d, _ = _uncertainty_and_misalignment(model, policy, params, spec.states(), action_scale)
    u, d = u.reshape(spec.shape), d.reshape(spec.shape)
    return GridStudy(spec, u, d, u < kappa, float(kappa))


def discount_weights(gamma: float, horizon: int) -> np.ndarray:
    """gamma^t for t = 0..horizon (with 0^0 = 1)."""
    return np.array([gamma**t for t in range(horizon + 1)], dtype=np.float64)


def bound_constant(r_max: float, delta_p: float, gamma: float, T: int) -> float:
    """2 r_max sum_{t=0}^{T} gamma^t sum_{tau=0}^{t} delta_p."""
    if T < 0:
        return 0.0
    steps = np.arange(T + 1, dtype=np.float64)
    return float(2.0 * r_max * np.sum(discount_weights(gamma, T) * (steps + 1.0) * delta_p))


def _discounted(rewards, weights, T):
    # rewards (n, H+1); sum over t <= T_i
    mask = np.arange(rewards.shape[1])[None, :] <= T[:, None]
    return np.sum(np.where(mask, rewards * weights[None, :], 0.0), axis=1)


def bound_check(model, policy: Policy, params: PendulumParams, kappa: float, gamma: float, horizon: int,
                n_rollouts: int, rng: np.random.Generator, start_states, action_scale: float = 1.0,
                spec: GridSpec = GridSpec(), visited_states=None) -> BoundReport:
    """Coupled real/model rollouts against the accumulated-misalignment bound.

    Start states are drawn (with replacement) from those ``start_states`` whose
    disagreement is below ``kappa``.  Each pair of rollouts runs ``horizon``
    steps under the deterministic ``policy``; the exact stopping time is one
    less than the first step at which either trajectory leaves the set, the
    approximate one uses the model trajectory only.  Rewards are shifted by a
    constant so that the smallest one observed (grid and rollouts) equals
    ``REWARD_FLOOR``.  The sup of the misalignment over the set is estimated
    on the grid, and on ``visited_states`` when given.
    """
    if not kappa > 0:
        raise ValueError("kappa must be positive")
    if not 0 <= gamma < 1:
        raise ValueError("gamma must lie in [0, 1)")
    if horizon < 1 or n_rollouts < 1:
        raise ValueError("horizon and n_rollouts must be >= 1")

    grid_states = spec.states()
    u_grid, d_grid, a_grid = _uncertainty_and_misalignment(model, policy, params, grid_states, action_scale)
    in_grid = u_grid < kappa
    delta_p = float(d_grid[in_grid].max()) if in_grid.any() else 0.0
    source = "grid"
    if visited_states is not None and len(visited_states):
        u_v, d_v, _ = _uncertainty_and_misalignment(model, policy, params, np.atleast_2d(visited_states),
                                                    action_scale)
        if np.any(u_v < kappa):
            delta_p = max(delta_p, float(d_v[u_v < kappa].max()))
        source = "grid+visited"

    starts = np.atleast_2d(np.asarray(start_states, dtype=np.float64))
    u_start, _, _ = _uncertainty_and_misalignment(model, policy, params, starts, action_scale)
    eligible = starts[u_start < kappa]
    if len(eligible) == 0:
        raise ValueError("no start state lies in the low-uncertainty set")
    s0 = eligible[rng.integers(0, len(eligible), size=n_rollouts)]

    n, H = n_rollouts, horizon
    real = np.empty((n, H + 1, 2))
    sim = np.empty((n, H + 1, 2))
    r_real = np.empty((n, H + 1))
    r_sim = np.empty((n, H + 1))
    u_real = np.empty((n, H + 1))
    u_sim = np.empty((n, H + 1))
    real[:, 0] = sim[:, 0] = s0
    for t in range(H + 1):
        a_real, a_sim = policy(real[:, t]), policy(sim[:, t])
        r_real[:, t] = reward(real[:, t], action_scale * a_real)
        r_sim[:, t] = reward(sim[:, t], action_scale * a_sim)
        means, variances = _predict(model, np.concatenate([real[:, t], sim[:, t]]), np.concatenate([a_real, a_sim]))
        u = u_gjs_arrays(means, variances)
        u_real[:, t], u_sim[:, t] = u[:n], u[n:]
        if t == H:
            break
        true_mean, true_var = _true_kernel(params, real[:, t], a_real, action_scale)
        real[:, t + 1] = true_mean + np.sqrt(true_var) * rng.standard_normal(true_mean.shape)
        member = rng.integers(0, means.shape[0], size=n)
        rows = n + np.arange(n)
        sim[:, t + 1] = means[member, rows] + np.sqrt(variances[member, rows]) * rng.standard_normal((n, 2))

    def first_exit(u):
        out = u >= kappa
        return np.where(out.any(axis=1), out.argmax(axis=1), H + 1)

    exit_real, exit_sim = first_exit(u_real), first_exit(u_sim)
    T = np.minimum(exit_real, exit_sim) - 1
    T_approx = exit_sim - 1

    all_rewards = np.concatenate([reward(grid_states, action_scale * a_grid), r_real.ravel(), r_sim.ravel()])
    if not np.all(np.isfinite(all_rewards)):
        raise FloatingPointError("non-finite reward in bound diagnostic")
    shift = REWARD_FLOOR - float(all_rewards.min())
    r_max = float(all_rewards.max()) + shift

    weights = discount_weights(gamma, H)
    eta_hat = _discounted(r_real + shift, weights, T)
    eta_tilde = _discounted(r_sim + shift, weights, T)
    eta_hat_a = _discounted(r_real + shift, weights, T_approx)
    eta_tilde_a = _discounted(r_sim + shift, weights, T_approx)

    def stderr(x):
        return float(np.std(x, ddof=1) / math.sqrt(len(x))) if len(x) > 1 else 0.0

    se, se_a = stderr(eta_hat - eta_tilde), stderr(eta_hat_a - eta_tilde_a)
    C = bound_constant(r_max, delta_p, gamma, int(T.max()))
    C_a = bound_constant(r_max, delta_p, gamma, int(T_approx.max()))
    gap, gap_a = abs(eta_hat.mean() - eta_tilde.mean()), abs(eta_hat_a.mean() - eta_tilde_a.mean())
    return BoundReport(
        eta_hat=float(eta_hat.mean()),
        eta_tilde=float(eta_tilde.mean()),
        delta_p_sup=delta_p,
        C=C,
        holds=bool(gap <= C + 3.0 * se),
        standard_error=se,
        r_max=r_max,
        reward_shift=shift,
        max_stopping_time=int(T.max()),
        mean_stopping_time=float(T.mean()),
        eta_hat_approx=float(eta_hat_a.mean()),
        eta_tilde_approx=float(eta_tilde_a.mean()),
        C_approx=C_a,
        holds_approx=bool(gap_a <= C_a + 3.0 * se_a),
        n_rollouts=n,
        start_states_in_E=len(eligible),
        delta_p_source=source,
        stopping_times=T,
        approx_stopping_times=T_approx,
    )
