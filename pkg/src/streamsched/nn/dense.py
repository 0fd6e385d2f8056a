from __future__ import annotations

from typing import Sequence

import torch
from torch import nn

from ..events import DomainError
from ._init import DTYPE, make_generator, uniform_param

ACTIVATIONS = ("sigmoid", "relu", "softmax", "identity")


def _activate(x: torch.Tensor, tag: str) -> torch.Tensor:
    if tag == "sigmoid":
        return torch.sigmoid(x)
    if tag == "relu":
        return torch.relu(x)
    if tag == "softmax":
        return torch.softmax(x, dim=-1)
    return x


class MLP(nn.Module):
    """Stack of affine layers ``y = act(x @ W + b)`` with one activation tag per layer."""

    def __init__(self, sizes: Sequence[int], activations: Sequence[str], seed: int = 0):
        super().__init__()
        if len(sizes) < 2 or len(activations) != len(sizes) - 1:
            raise DomainError("need len(activations) == len(sizes) - 1 >= 1")
        bad = [a for a in activations if a not in ACTIVATIONS]
        if bad:
            raise DomainError(f"unknown activation(s) {bad}")
        gen = make_generator(seed)
        self.sizes = tuple(int(s) for s in sizes)
        self.activations = tuple(activations)
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            self.weights.append(uniform_param((fan_in, fan_out), fan_in, gen))
            self.biases.append(uniform_param((fan_out,), fan_in, gen))

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        """Output before the last activation."""
        self._check(x)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = x @ w + b
            if i < last:
                x = _activate(x, self.activations[i])
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return _activate(self.logits(x), self.activations[-1])

    def _check(self, x: torch.Tensor) -> None:
        if x.shape[-1] != self.in_dim:
            raise DomainError(f"MLP expects input dim {self.in_dim}, got {x.shape[-1]}")


def mlp_forward(x, params: MLP) -> torch.Tensor:
    return params(torch.as_tensor(x, dtype=DTYPE))
