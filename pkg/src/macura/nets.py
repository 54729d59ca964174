"""Batched linear layers shared by the dynamics ensemble and the agent networks."""

from __future__ import annotations

import math

import torch
from torch import nn

__all__ = ["EnsembleLinear"]


class EnsembleLinear(nn.Module):
    """``members`` independent affine maps applied with one batched matmul.

    Weights have shape ``(members, n_in, n_out)``; inputs are ``(members, N, n_in)``.
    """

    def __init__(self, members: int, n_in: int, n_out: int, dtype=torch.float32):
        super().__init__()
        self.weight = nn.Parameter(torch.zeros(members, n_in, n_out, dtype=dtype))
        self.bias = nn.Parameter(torch.zeros(members, 1, n_out, dtype=dtype))

    def reset_parameters(self, generator: torch.Generator, scheme: str = "trunc_normal"):
        n_in = self.weight.shape[1]
        with torch.no_grad():
            if scheme == "trunc_normal":
                std = 1.0 / (2.0 * math.sqrt(n_in))
                nn.init.trunc_normal_(self.weight, std=std, a=-2 * std, b=2 * std, generator=generator)
                self.bias.zero_()
            elif scheme == "uniform":
                bound = 1.0 / math.sqrt(n_in)
                self.weight.uniform_(-bound, bound, generator=generator)
                self.bias.uniform_(-bound, bound, generator=generator)
            else:
                raise ValueError(f"unknown init scheme {scheme!r}")

    def forward(self, x):
        return torch.baddbmm(self.bias, x, self.weight)
