"""Closed-form algebra on diagonal Gaussians and ensemble disagreement measures.

Every divergence has two entry points: a scalar function taking
:class:`DiagGaussian` objects, and an ``*_arrays`` variant operating on
stacked ``(..., d)`` mean/variance arrays.  The array variants are what the
rollout schedulers call on whole batches of model predictions; the scalar
ones are thin wrappers around them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np

__all__ = [
    "DiagGaussian",
    "EnsemblePrediction",
    "Diagnostics",
    "kl_divergence",
    "geometric_mean_gaussian",
    "gjs_divergence",
    "hellinger_distance",
    "tv_upper_bound",
    "u_gjs",
    "u_ovr",
    "u_mean_variance",
    "kl_arrays",
    "geometric_mean_arrays",
    "gjs_arrays",
    "hellinger_arrays",
    "u_gjs_arrays",
    "u_ovr_arrays",
    "u_mean_variance_arrays",
]

RATIO_FLOOR = 1e-12
RATIO_CEIL = 1e12


@dataclass
class Diagnostics:
    """Counts variance-ratio clamping events.

    Pass an instance to any divergence function to have clamped ratio
    entries tallied; the functions themselves hold no state.
    """

    clamp_events: int = 0


@dataclass(frozen=True)
class DiagGaussian:
    """Multivariate normal with diagonal covariance."""

    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.array(self.mean, dtype=np.float64))
        var = np.atleast_1d(np.array(self.var, dtype=np.float64))
        if mean.ndim != 1 or var.ndim != 1:
            raise ValueError("mean and var must be vectors")
        if mean.shape != var.shape:
            raise ValueError(f"dimension mismatch: mean {mean.shape} vs var {var.shape}")
        if mean.size == 0:
            raise ValueError("dimension must be at least 1")
        if not np.all(np.isfinite(mean)):
            raise ValueError("mean has non-finite entries")
        if not np.all(np.isfinite(var)) or np.any(var <= 0):
            raise ValueError("var must be finite and strictly positive")
        mean.setflags(write=False)
        var.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "var", var)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.var)


@dataclass(frozen=True)
class EnsemblePrediction:
    """Ordered member predictions of a probabilistic ensemble."""

    members: tuple[DiagGaussian, ...] = field()

    def __post_init__(self):
        members = tuple(self.members)
        if len(members) < 2:
            raise ValueError(f"an ensemble needs at least 2 members, got {len(members)}")
        dims = {m.dim for m in members}
        if len(dims) != 1:
            raise ValueError(f"members disagree on dimension: {sorted(dims)}")
        object.__setattr__(self, "members", members)

    @classmethod
    def from_arrays(cls, means, variances) -> "EnsemblePrediction":
        return cls(tuple(DiagGaussian(m, v) for m, v in zip(means, variances)))

    @property
    def size(self) -> int:
        return len(self.members)

    def stacked(self) -> tuple[np.ndarray, np.ndarray]:
        """Means and variances as ``(E, d)`` arrays."""
        return (np.stack([m.mean for m in self.members]),
                np.stack([m.var for m in self.members]))


def _check_pair(p: DiagGaussian, q: DiagGaussian) -> None:
    if p.dim != q.dim:
        raise ValueError(f"dimension mismatch: {p.dim} vs {q.dim}")


def _clamped_ratio(num, den, diagnostics: Diagnostics | None):
    ratio = num / den
    if diagnostics is not None:
        diagnostics.clamp_events += int(np.count_nonzero((ratio < RATIO_FLOOR) | (ratio > RATIO_CEIL)))
    return np.clip(ratio, RATIO_FLOOR, RATIO_CEIL)


def kl_arrays(mu_p, var_p, mu_q, var_q, diagnostics: Diagnostics | None = None) -> np.ndarray:
    """KL(p || q) for diagonal Gaussians, reducing over the last axis."""
    mu_p, var_p, mu_q, var_q = (np.asarray(x, dtype=np.float64) for x in (mu_p, var_p, mu_q, var_q))
    ratio = _clamped_ratio(var_p, var_q, diagnostics)
    # ratio - 1 - log(ratio) >= 0, written with log1p to stay accurate near 1
    spread = (ratio - 1.0) - np.log1p(ratio - 1.0)
    spread = np.maximum(spread, 0.0)
    shift = (mu_q - mu_p) ** 2 / var_q
    return 0.5 * np.sum(spread + shift, axis=-1)


def geometric_mean_arrays(mu_p, var_p, mu_q, var_q) -> tuple[np.ndarray, np.ndarray]:
    """Equal-weight geometric mean of two diagonal Gaussians.

    Precision is the average of the two precisions, the mean is
    precision-weighted.  Identical inputs return themselves exactly.
    """
    mu_p, var_p, mu_q, var_q = (np.asarray(x, dtype=np.float64) for x in (mu_p, var_p, mu_q, var_q))
    total = var_p + var_q
    var_m = np.where(var_p == var_q, var_p, 2.0 * var_p * var_q / total)
    mu_m = np.where(mu_p == mu_q, mu_p, (mu_p * var_q + mu_q * var_p) / total)
    return mu_m, var_m


def gjs_arrays(mu_p, var_p, mu_q, var_q, diagnostics: Diagnostics | None = None) -> np.ndarray:
    mu_m, var_m = geometric_mean_arrays(mu_p, var_p, mu_q, var_q)
    return 0.5 * kl_arrays(mu_p, var_p, mu_m, var_m, diagnostics) + 0.5 * kl_arrays(
        mu_q, var_q, mu_m, var_m, diagnostics
    )


def hellinger_arrays(mu_p, var_p, mu_q, var_q, diagnostics: Diagnostics | None = None) -> np.ndarray:
    """Hellinger distance with H^2 = 1 - Bhattacharyya coefficient."""
    mu_p, var_p, mu_q, var_q = (np.asarray(x, dtype=np.float64) for x in (mu_p, var_p, mu_q, var_q))
    ratio = _clamped_ratio(var_p, var_q, diagnostics)
    # half of log(2 sqrt(r) / (1 + r)); never positive
    log_scale = 0.5 * (math.log(2.0) + 0.5 * np.log(ratio) - np.log1p(ratio))
    log_scale = np.where(ratio == 1.0, 0.0, np.minimum(log_scale, 0.0))
    log_bc = np.sum(log_scale - (mu_p - mu_q) ** 2 / (4.0 * (var_p + var_q)), axis=-1)
    return np.sqrt(np.clip(-np.expm1(log_bc), 0.0, 1.0))


def kl_divergence(p: DiagGaussian, q: DiagGaussian, diagnostics: Diagnostics | None = None) -> float:
    """KL(p || q) in nats."""
    _check_pair(p, q)
    return float(kl_arrays(p.mean, p.var, q.mean, q.var, diagnostics))


def geometric_mean_gaussian(p: DiagGaussian, q: DiagGaussian) -> DiagGaussian:
    _check_pair(p, q)
    return DiagGaussian(*geometric_mean_arrays(p.mean, p.var, q.mean, q.var))


def gjs_divergence(p: DiagGaussian, q: DiagGaussian, diagnostics: Diagnostics | None = None) -> float:
    """Geometric Jensen-Shannon divergence: mean KL of both sides to their geometric mean."""
    _check_pair(p, q)
    return float(gjs_arrays(p.mean, p.var, q.mean, q.var, diagnostics))


def hellinger_distance(p: DiagGaussian, q: DiagGaussian, diagnostics: Diagnostics | None = None) -> float:
    _check_pair(p, q)
    return float(hellinger_arrays(p.mean, p.var, q.mean, q.var, diagnostics))


def tv_upper_bound(p: DiagGaussian, q: DiagGaussian) -> float:
    """sqrt(2) * Hellinger, an upper bound on total variation distance."""
    return math.sqrt(2.0) * hellinger_distance(p, q)


def u_gjs_arrays(means, variances, diagnostics: Diagnostics | None = None) -> np.ndarray:
    """Average pairwise GJS over the leading (member) axis.

    ``means`` and ``variances`` have shape ``(E, ..., d)``; the result has
    shape ``(...)``.
    """
    means = np.asarray(means, dtype=np.float64)
    variances = np.asarray(variances, dtype=np.float64)
    n_members = means.shape[0]
    if n_members < 2:
        raise ValueError(f"u_gjs needs at least 2 members, got {n_members}")
    total = np.zeros(means.shape[1:-1])
    for e, f in combinations(range(n_members), 2):
        total = total + gjs_arrays(means[e], variances[e], means[f], variances[f], diagnostics)
    return 2.0 * total / (n_members * (n_members - 1))


def u_ovr_arrays(means, variances, held_out, diagnostics: Diagnostics | None = None) -> np.ndarray:
    """One-versus-rest KL for a held-out member index per batch entry.

    ``held_out`` is an int or an integer array broadcastable to the batch
    shape ``means.shape[1:-1]``.
    """
    means = np.asarray(means, dtype=np.float64)
    variances = np.asarray(variances, dtype=np.float64)
    n_members = means.shape[0]
    if n_members < 2:
        raise ValueError(f"u_ovr needs at least 2 members, got {n_members}")
    held_out = np.broadcast_to(np.asarray(held_out), means.shape[1:-1])
    if np.any(held_out < 0) or np.any(held_out >= n_members):
        raise IndexError(f"member index out of range for ensemble of size {n_members}")
    onehot = (np.arange(n_members).reshape((n_members,) + (1,) * held_out.ndim) == held_out)[..., None]
    rest = ~onehot
    mu_e = np.sum(np.where(onehot, means, 0.0), axis=0)
    var_e = np.sum(np.where(onehot, variances, 0.0), axis=0)
    mu_rest = np.sum(np.where(rest, means, 0.0), axis=0) / (n_members - 1)
    # second moment minus squared mean, in centred form so it stays >= the mean variance
    centred = np.where(rest, variances + (means - mu_rest) ** 2, 0.0)
    var_rest = np.sum(centred, axis=0) / (n_members - 1)
    return kl_arrays(mu_e, var_e, mu_rest, var_rest, diagnostics)


def u_mean_variance_arrays(means) -> np.ndarray:
    """Frobenius norm of the (1/E-normalised) covariance of member means."""
    means = np.asarray(means, dtype=np.float64)
    n_members = means.shape[0]
    if n_members < 2:
        raise ValueError(f"u_mean_variance needs at least 2 members, got {n_members}")
    centred = means - means.mean(axis=0)
    cov = np.einsum("e...i,e...j->...ij", centred, centred) / n_members
    return np.sqrt(np.sum(cov**2, axis=(-2, -1)))


def _as_prediction(pred) -> EnsemblePrediction:
    if isinstance(pred, EnsemblePrediction):
        return pred
    return EnsemblePrediction(tuple(pred))


def u_gjs(pred: EnsemblePrediction | Sequence[DiagGaussian], diagnostics: Diagnostics | None = None) -> float:
    pred = _as_prediction(pred)
    n = pred.size
    terms = [gjs_divergence(pred.members[e], pred.members[f], diagnostics) for e, f in combinations(range(n), 2)]
    # fsum keeps the result independent of member order up to final rounding
    return 2.0 * math.fsum(terms) / (n * (n - 1))


def u_ovr(pred: EnsemblePrediction | Sequence[DiagGaussian], e: int, diagnostics: Diagnostics | None = None) -> float:
    pred = _as_prediction(pred)
    if not 0 <= e < pred.size:
        raise IndexError(f"member index {e} out of range for ensemble of size {pred.size}")
    means, variances = pred.stacked()
    return float(u_ovr_arrays(means, variances, e, diagnostics))


def u_mean_variance(pred: EnsemblePrediction | Sequence[DiagGaussian]) -> float:
    means, _ = _as_prediction(pred).stacked()
    return float(u_mean_variance_arrays(means))
