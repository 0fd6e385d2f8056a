from __future__ import annotations

import math

import torch

DTYPE = torch.float64


def make_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def uniform_param(shape, fan_in: int, gen: torch.Generator) -> torch.nn.Parameter:
    """Parameter drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    t = torch.empty(shape, dtype=DTYPE).uniform_(-bound, bound, generator=gen)
    return torch.nn.Parameter(t)
