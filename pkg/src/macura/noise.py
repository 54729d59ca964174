"""Exploration noise sequences for the squashed-Gaussian policy.

A process hands out one standard-normal-ish vector per environment step;
the agent turns it into an action as ``tanh(mu + sigma * eps)``.
"""

from __future__ import annotations

import numpy as np

__all__ = ["NOISE_KINDS", "NoiseProcess", "pink_sequence"]

NOISE_KINDS = ("deterministic", "white", "pink")


def pink_sequence(rng: np.random.Generator, n: int, dim: int = 1, beta: float = 1.0) -> np.ndarray:
    """Power-law noise of shape ``(n, dim)`` with spectrum ~ 1/f^beta.

    Each column is normalised to zero mean and unit standard deviation.
    """
    if n < 2:
        raise ValueError("need at least 2 samples")
    freqs = np.fft.rfftfreq(n)
    scale = np.zeros_like(freqs)
    scale[1:] = freqs[1:] ** (-beta / 2.0)
    spectrum = (rng.normal(size=(dim, freqs.size)) + 1j * rng.normal(size=(dim, freqs.size))) * scale
    if n % 2 == 0:
        # the Nyquist bin of a real signal is real
        spectrum[:, -1] = spectrum[:, -1].real * np.sqrt(2.0)
    x = np.fft.irfft(spectrum, n=n, axis=1)
    x -= x.mean(axis=1, keepdims=True)
    x /= x.std(axis=1, keepdims=True)
    return x.T


class NoiseProcess:
    """Per-episode buffered noise; call :meth:`reset` at every episode start."""

    def __init__(self, kind: str = "white", dim: int = 1, horizon: int = 200, beta: float = 1.0):
        if kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {kind!r}; expected one of {NOISE_KINDS}")
        if dim < 1 or horizon < 1:
            raise ValueError("dim and horizon must be positive")
        self.kind = kind
        self.dim = int(dim)
        self.horizon = int(horizon)
        self.beta = float(beta)
        self._buffer: np.ndarray | None = None
        self._cursor = 0

    @property
    def cursor(self) -> int:
        return self._cursor

    def reset(self, rng: np.random.Generator) -> None:
        if self.kind == "deterministic":
            self._buffer = np.zeros((self.horizon, self.dim))
        elif self.kind == "white":
            self._buffer = rng.standard_normal((self.horizon, self.dim))
        else:
            self._buffer = pink_sequence(rng, max(self.horizon, 2), self.dim, self.beta)[: self.horizon]
        self._cursor = 0

    def next_epsilon(self) -> np.ndarray:
        if self._buffer is None:
            raise RuntimeError("reset() must be called before drawing noise")
        if self._cursor >= self.horizon:
            raise RuntimeError(f"noise sequence exhausted after {self.horizon} steps; reset for a new episode")
        eps = self._buffer[self._cursor].copy()
        self._cursor += 1
        return eps

    def sequence(self) -> np.ndarray:
        """The whole current buffer (read-only copy)."""
        if self._buffer is None:
            raise RuntimeError("reset() must be called first")
        return self._buffer.copy()
