"""Replay buffers and branched model rollouts.

Three schedulers share one rollout loop and differ only in which
transitions they keep:

* ``vanilla``: every rollout runs the full ``max_length`` steps.
* ``macura``: a transition is stored only while the ensemble's GJS
  disagreement stays below the threshold kappa; a rollout stops at its
  first violation.  kappa is refreshed each round from the first-step
  disagreements before anything is filtered.
* ``rank_based``: every active transition is stored, then only the
  least-uncertain fraction (one-vs-rest KL against a random held-out
  member) continues to the next step.

Model protocol: ``model.predict(states, actions) -> (means, variances)``
with shape ``(E, N, d)``.  Agent protocol: ``agent.sample_actions(states,
rng) -> (N, act_dim)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .gaussian import u_gjs_arrays, u_ovr_arrays
from .sac import Batch

__all__ = [
    "SCHEDULERS",
    "ReplayBuffer",
    "KappaTracker",
    "RolloutConfig",
    "RolloutRoundReport",
    "base_uncertainty",
    "sample_mixed_batch",
    "vanilla_rollout_round",
    "macura_rollout_round",
    "rank_based_rollout_round",
    "rollout_round",
    "compute_update_steps",
    "model_buffer_capacity",
]

SCHEDULERS = ("vanilla", "macura", "rank_based")


class ReplayBuffer:
    """Fixed-capacity FIFO ring of ``(s, a, r, s', done)`` transitions."""

    def __init__(self, capacity: int, obs_dim: int, act_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self._s = np.zeros((capacity, obs_dim))
        self._a = np.zeros((capacity, act_dim))
        self._r = np.zeros(capacity)
        self._s2 = np.zeros((capacity, obs_dim))
        self._d = np.zeros(capacity)
        self._next = 0
        self._size = 0
        self.total_added = 0

    def __len__(self):
        return self._size

    def add(self, s, a, r, s2, done=False):
        self.add_batch(np.atleast_2d(s), np.atleast_2d(a), np.atleast_1d(r), np.atleast_2d(s2), np.atleast_1d(done))

    def add_batch(self, s, a, r, s2, done=None):
        n = len(s)
        if n == 0:
            return
        done = np.zeros(n) if done is None else np.asarray(done, dtype=np.float64)
        if n > self.capacity:
            s, a, r, s2, done = (x[-self.capacity:] for x in (s, a, r, s2, done))
            self._next = (self._next + n - self.capacity) % self.capacity
            self.total_added += n - self.capacity
            n = self.capacity
        idx = (self._next + np.arange(n)) % self.capacity
        self._s[idx], self._a[idx], self._r[idx], self._s2[idx], self._d[idx] = s, a, r, s2, done
        self._next = (self._next + n) % self.capacity
        self._size = min(self._size + n, self.capacity)
        self.total_added += n

    def clear(self):
        self._next = self._size = 0

    def _order(self):
        # oldest first
        start = (self._next - self._size) % self.capacity
        return (start + np.arange(self._size)) % self.capacity

    @property
    def states(self):
        return self._s[self._order()]

    @property
    def actions(self):
        return self._a[self._order()]

    @property
    def rewards(self):
        return self._r[self._order()]

    @property
    def next_states(self):
        return self._s2[self._order()]

    @property
    def dones(self):
        return self._d[self._order()]

    def _take(self, idx) -> Batch:
        return Batch(self._s[idx], self._a[idx], self._r[idx], self._s2[idx], self._d[idx])

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        if self._size == 0:
            raise ValueError("cannot sample from an empty buffer")
        pos = rng.integers(0, self._size, size=n)
        return self._take(self._order()[pos])

    def sample_states(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self._size == 0:
            raise ValueError("cannot sample from an empty buffer")
        return self._s[self._order()[rng.integers(0, self._size, size=n)]]

    def all(self) -> Batch:
        return self._take(self._order())


def sample_mixed_batch(d_env: ReplayBuffer, d_mod: ReplayBuffer, batch_size: int, env_fraction: float,
                       rng: np.random.Generator) -> Batch:
    """``round(env_fraction * batch_size)`` real transitions, the rest synthetic.

    A short model buffer is topped up from the environment buffer and
    vice versa.
    """
    n_env = math.floor(env_fraction * batch_size + 0.5)
    if len(d_mod) == 0:
        n_env = batch_size
    elif len(d_env) == 0:
        n_env = 0
    parts = []
    if n_env:
        parts.append(d_env.sample(n_env, rng))
    if batch_size - n_env:
        parts.append(d_mod.sample(batch_size - n_env, rng))
    return Batch(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                   ("states", "actions", "rewards", "next_states", "dones")))


def base_uncertainty(values, zeta: float) -> float:
    """Order statistic ``ceil(zeta * M)`` (1-based) of the M values, no interpolation."""
    values = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if values.size == 0:
        raise ValueError("no uncertainty values")
    rank = math.ceil(round(zeta * values.size, 9))
    return float(values[min(max(rank, 1), values.size) - 1])


class KappaTracker:
    """Running threshold: kappa = xi * mean of all per-round base uncertainties."""

    def __init__(self, zeta: float = 0.95, xi: float = 1.0):
        if not 0 < zeta < 1:
            raise ValueError("zeta must lie in (0, 1)")
        if xi <= 0:
            raise ValueError("xi must be positive")
        self.zeta, self.xi = float(zeta), float(xi)
        self.history: list[float] = []

    @property
    def K(self) -> int:
        return len(self.history)

    @property
    def sum_base_uncertainty(self) -> float:
        return math.fsum(self.history)

    @property
    def kappa(self) -> float:
        if not self.history:
            return math.inf
        return self.xi * self.sum_base_uncertainty / self.K

    def record(self, u_hat: float) -> float:
        self.history.append(float(u_hat))
        return self.kappa

    def update(self, first_step_uncertainties) -> float:
        """Add one round's base uncertainty; returns the new kappa."""
        return self.record(base_uncertainty(first_step_uncertainties, self.zeta))


@dataclass(frozen=True)
class RolloutConfig:
    rollouts_per_round: int = 128
    max_length: int = 10
    scheduler: str = "macura"
    rank_keep_fraction: float = 0.875

    def __post_init__(self):
        if self.rollouts_per_round < 1 or self.max_length < 1:
            raise ValueError("rollouts_per_round and max_length must be >= 1")
        if self.scheduler not in SCHEDULERS:
            raise ValueError(f"unknown scheduler {self.scheduler!r}")
        if not 0 < self.rank_keep_fraction <= 1:
            raise ValueError("rank_keep_fraction must lie in (0, 1]")


@dataclass
class RolloutRoundReport:
    stored_transitions: int
    mean_rollout_length: float
    kappa_used: float
    base_uncertainty: float
    termination_counts: np.ndarray  # [L] = rollouts that stored exactly L transitions
    lengths: np.ndarray = field(repr=False)
    start_indices: np.ndarray = field(repr=False)
    member_counts: np.ndarray = field(repr=False)


RewardFn = Callable[[np.ndarray, np.ndarray], np.ndarray]
TerminationFn = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


def _draw_starts(d_env, n, rng):
    return d_env._order()[rng.integers(0, len(d_env), size=n)]


def _run(model, agent, d_env, d_mod, cfg: RolloutConfig, rng, reward_fn: RewardFn,
         termination_fn: Optional[TerminationFn], select, kappa=math.nan, u_hat=math.nan, start_idx=None,
         first=None):
    if len(d_env) == 0:
        raise ValueError("environment buffer is empty")
    M, T = cfg.rollouts_per_round, cfg.max_length
    if start_idx is None:
        start_idx = _draw_starts(d_env, M, rng)
    states = d_env._s[start_idx].copy()
    active = np.arange(M)
    lengths = np.zeros(M, dtype=np.int64)
    member_counts = None
    for t in range(T):
        if active.size == 0:
            break
        if t == 0 and first is not None:
            actions, means, variances, u = first
        else:
            actions = agent.sample_actions(states, rng)
            means, variances = model.predict(states, actions)
            u = None
        n_members = means.shape[0]
        if member_counts is None:
            member_counts = np.zeros(n_members, dtype=np.int64)
        store, cont = select(t, means, variances, u, rng)
        keep = np.flatnonzero(store)
        if keep.size:
            members = rng.integers(0, n_members, size=keep.size)
            member_counts += np.bincount(members, minlength=n_members)
            mu = means[members, keep]
            std = np.sqrt(variances[members, keep])
            nxt = mu + std * rng.standard_normal(mu.shape)
            s, a = states[keep], actions[keep]
            r = np.asarray(reward_fn(s, a), dtype=np.float64).reshape(-1)
            done = (np.zeros(keep.size) if termination_fn is None
                    else np.asarray(termination_fn(s, a, nxt), dtype=np.float64).reshape(-1))
            d_mod.add_batch(s, a, r, nxt, done)
            lengths[active[keep]] += 1
            next_states = np.empty_like(states)
            next_states[keep] = nxt
            cont = cont & store
            cont[keep[done > 0]] = False
        else:
            next_states = states
            cont = np.zeros(active.size, dtype=bool)
        states = next_states[cont]
        active = active[cont]
    return RolloutRoundReport(
        stored_transitions=int(lengths.sum()),
        mean_rollout_length=float(lengths.mean()),
        kappa_used=float(kappa),
        base_uncertainty=float(u_hat),
        termination_counts=np.bincount(lengths, minlength=T + 1),
        lengths=lengths,
        start_indices=start_idx,
        member_counts=member_counts if member_counts is not None else np.zeros(0, dtype=np.int64),
    )


def vanilla_rollout_round(model, agent, d_env, d_mod, cfg: RolloutConfig, rng, reward_fn: RewardFn,
                          termination_fn: Optional[TerminationFn] = None) -> RolloutRoundReport:
    def select(t, means, variances, u, rng):
        everyone = np.ones(means.shape[1], dtype=bool)
        return everyone, everyone

    return _run(model, agent, d_env, d_mod, cfg, rng, reward_fn, termination_fn, select)


def macura_rollout_round(model, agent, d_env, d_mod, cfg: RolloutConfig, tracker: KappaTracker, rng,
                         reward_fn: RewardFn, termination_fn: Optional[TerminationFn] = None) -> RolloutRoundReport:
    if len(d_env) == 0:
        raise ValueError("environment buffer is empty")
    # first steps of all M rollouts are predicted up front so the threshold
    # can be refreshed before any of them is filtered
    start_idx = _draw_starts(d_env, cfg.rollouts_per_round, rng)
    actions = agent.sample_actions(d_env._s[start_idx], rng)
    means, variances = model.predict(d_env._s[start_idx], actions)
    u0 = u_gjs_arrays(means, variances)
    u_hat = base_uncertainty(u0, tracker.zeta)
    kappa = tracker.record(u_hat)

    def select(t, means, variances, u, rng):
        if u is None:
            u = u_gjs_arrays(means, variances)
        # zero disagreement is always accepted; otherwise kappa = 0 (a round
        # where every member agreed exactly) would reject everything
        store = (u < kappa) | (u == 0.0)
        return store, store.copy()

    return _run(model, agent, d_env, d_mod, cfg, rng, reward_fn, termination_fn, select, kappa, u_hat,
                start_idx=start_idx, first=(actions, means, variances, u0))


def rank_based_rollout_round(model, agent, d_env, d_mod, cfg: RolloutConfig, rng, reward_fn: RewardFn,
                             termination_fn: Optional[TerminationFn] = None) -> RolloutRoundReport:
    def select(t, means, variances, u, rng):
        n = means.shape[1]
        held_out = rng.integers(0, means.shape[0], size=n)
        u = u_ovr_arrays(means, variances, held_out)
        survivors = math.ceil(round(cfg.rank_keep_fraction * n, 9))
        cont = np.zeros(n, dtype=bool)
        cont[np.argsort(u, kind="stable")[:survivors]] = True
        return np.ones(n, dtype=bool), cont

    return _run(model, agent, d_env, d_mod, cfg, rng, reward_fn, termination_fn, select)


def rollout_round(model, agent, d_env, d_mod, cfg: RolloutConfig, rng, reward_fn: RewardFn,
                  tracker: Optional[KappaTracker] = None, termination_fn: Optional[TerminationFn] = None):
    if cfg.scheduler == "macura":
        if tracker is None:
            raise ValueError("the macura scheduler needs a KappaTracker")
        return macura_rollout_round(model, agent, d_env, d_mod, cfg, tracker, rng, reward_fn, termination_fn)
    if cfg.scheduler == "rank_based":
        return rank_based_rollout_round(model, agent, d_env, d_mod, cfg, rng, reward_fn, termination_fn)
    return vanilla_rollout_round(model, agent, d_env, d_mod, cfg, rng, reward_fn, termination_fn)


def compute_update_steps(g_max: int, d_mod_size: int, d_mod_capacity: int) -> int:
    """``G_max * size / capacity`` rounded to the nearest integer, halves away from zero."""
    if d_mod_capacity <= 0:
        raise ValueError("capacity must be positive")
    if not 0 <= d_mod_size <= d_mod_capacity:
        raise ValueError("size must lie in [0, capacity]")
    if g_max < 0:
        raise ValueError("g_max must be non-negative")
    # exact integer arithmetic: floor(x + 1/2) with x = g_max * size / capacity >= 0
    return (2 * g_max * d_mod_size + d_mod_capacity) // (2 * d_mod_capacity)


def model_buffer_capacity(rollouts_per_round: int, max_length: int, retain_rounds: int) -> int:
    if min(rollouts_per_round, max_length, retain_rounds) < 1:
        raise ValueError("all factors must be >= 1")
    return rollouts_per_round * max_length * retain_rounds
