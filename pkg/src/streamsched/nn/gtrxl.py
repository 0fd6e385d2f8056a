"""Gated transformer encoder over a single segment.

Each layer uses the identity-map reordering (layer norm on the sublayer
input only) and replaces both residual connections with a GRU-style gate::

    y  = relu(MHA(LN(x)));   x' = gate1(x, y)
    y' = relu(FFN(LN(x')));  out = gate2(x', y')

    gate(x, y): r = sigmoid(y W_r + x U_r)
                z = sigmoid(y W_z + x U_z - b_gate)
                h = tanh(y W_h + (r * x) U_h)
                return (1 - z) * x + z * h

A large ``b_gate`` closes the gate so each layer passes ``x`` through. Attention
is causal and carries a learned per-head bias indexed by the clipped relative
distance between query and key.
"""
from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from ..events import DomainError
from ._init import DTYPE, make_generator, uniform_param


class _Gate(nn.Module):
    def __init__(self, d: int, gen: torch.Generator, bias: float):
        super().__init__()
        self.W_r, self.U_r = uniform_param((d, d), d, gen), uniform_param((d, d), d, gen)
        self.W_z, self.U_z = uniform_param((d, d), d, gen), uniform_param((d, d), d, gen)
        self.W_h, self.U_h = uniform_param((d, d), d, gen), uniform_param((d, d), d, gen)
        self.b_gate = nn.Parameter(torch.full((d,), float(bias), dtype=DTYPE))

    def forward(self, x, y):
        r = torch.sigmoid(y @ self.W_r + x @ self.U_r)
        z = torch.sigmoid(y @ self.W_z + x @ self.U_z - self.b_gate)
        h = torch.tanh(y @ self.W_h + (r * x) @ self.U_h)
        return (1 - z) * x + z * h


class _Layer(nn.Module):
    def __init__(self, d: int, heads: int, ff: int, max_distance: int, gen, gate_bias: float):
        super().__init__()
        self.heads = heads
        self.ln1_w = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.ln1_b = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.W_q, self.W_k = uniform_param((d, d), d, gen), uniform_param((d, d), d, gen)
        self.W_v, self.W_out = uniform_param((d, d), d, gen), uniform_param((d, d), d, gen)
        self.rel_bias = nn.Parameter(torch.zeros(heads, max_distance + 1, dtype=DTYPE))
        self.gate1 = _Gate(d, gen, gate_bias)
        self.ln2_w = nn.Parameter(torch.ones(d, dtype=DTYPE))
        self.ln2_b = nn.Parameter(torch.zeros(d, dtype=DTYPE))
        self.W_ff1, self.b_ff1 = uniform_param((d, ff), d, gen), uniform_param((ff,), d, gen)
        self.W_ff2, self.b_ff2 = uniform_param((ff, d), ff, gen), uniform_param((d,), ff, gen)
        self.gate2 = _Gate(d, gen, gate_bias)

    def attention(self, x):
        L, d = x.shape
        dh = d // self.heads
        q = (x @ self.W_q).view(L, self.heads, dh).transpose(0, 1)
        k = (x @ self.W_k).view(L, self.heads, dh).transpose(0, 1)
        v = (x @ self.W_v).view(L, self.heads, dh).transpose(0, 1)
        scores = q @ k.transpose(1, 2) / math.sqrt(dh)
        pos = torch.arange(L)
        dist = pos[:, None] - pos[None, :]
        scores = scores + self.rel_bias[:, dist.clamp(0, self.rel_bias.shape[1] - 1)]
        scores = scores.masked_fill(dist < 0, float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        return out.transpose(0, 1).reshape(L, d) @ self.W_out

    def forward(self, x):
        d = x.shape[-1]
        y = torch.relu(self.attention(F.layer_norm(x, (d,), self.ln1_w, self.ln1_b)))
        x = self.gate1(x, y)
        h = F.layer_norm(x, (d,), self.ln2_w, self.ln2_b)
        y = torch.relu(torch.relu(h @ self.W_ff1 + self.b_ff1) @ self.W_ff2 + self.b_ff2)
        return self.gate2(x, y)


class GTrXL(nn.Module):
    def __init__(
        self,
        input_dim: int,
        model_dim: int,
        layers: int = 2,
        heads: int = 2,
        ff_dim: int | None = None,
        max_distance: int = 128,
        gate_bias: float = 2.0,
        seed: int = 0,
    ):
        super().__init__()
        if model_dim % heads:
            raise DomainError(f"model_dim {model_dim} not divisible by heads {heads}")
        gen = make_generator(seed)
        self.input_dim, self.model_dim = int(input_dim), int(model_dim)
        self.W_in = uniform_param((input_dim, model_dim), input_dim, gen)
        self.b_in = uniform_param((model_dim,), input_dim, gen)
        ff = ff_dim or 2 * model_dim
        self.layers = nn.ModuleList(
            _Layer(model_dim, heads, ff, max_distance, gen, gate_bias) for _ in range(layers)
        )

    def project(self, states: torch.Tensor) -> torch.Tensor:
        return states @ self.W_in + self.b_in

    def forward(self, states: torch.Tensor) -> torch.Tensor:
        """Map an ``(l_b, d_s)`` state sequence to ``(l_b, d_y)``."""
        if states.dim() != 2 or states.shape[1] != self.input_dim or states.shape[0] < 1:
            raise DomainError(f"expected states (l_b >= 1, {self.input_dim}), got {tuple(states.shape)}")
        x = self.project(states)
        for layer in self.layers:
            x = layer(x)
        return x


def gtrxl_encode(states, params: GTrXL) -> torch.Tensor:
    return params(torch.as_tensor(states, dtype=DTYPE))
