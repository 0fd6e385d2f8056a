"""Shared state encoding, the common actor, epsilon-greedy selection and the replay buffer."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .emulator import StateError
from .events import DomainError
from .nn import MLP, TimeLSTM
from .nn._init import DTYPE

ENGAGEMENT = "engagement"
ADOPTION = "adoption"
TASKS = (ENGAGEMENT, ADOPTION)


def encode_state(features, deltas, encoder: TimeLSTM) -> torch.Tensor:
    """State vector(s) for one window ``(l, d_x)`` or a batch ``(B, l, d_x)``."""
    return encoder(torch.as_tensor(features, dtype=DTYPE), torch.as_tensor(deltas, dtype=DTYPE))


def action_distribution(state: torch.Tensor, actor: MLP) -> torch.Tensor:
    return torch.softmax(actor.logits(state), dim=-1)


def select_action(state, actor: MLP, epsilon: float, rng: np.random.Generator):
    """Epsilon-greedy choice over the actor's softmax.

    One uniform draw decides exploration; an exploring step then draws the slot
    uniformly. Greedy ties go to the lowest index. Returns ``(index, probs)``.
    """
    if not 0.0 <= epsilon <= 1.0:
        raise DomainError(f"epsilon must be in [0, 1], got {epsilon}")
    with torch.no_grad():
        probs = action_distribution(torch.as_tensor(state, dtype=DTYPE), actor).numpy()
    return epsilon_greedy(probs, epsilon, rng), probs


def epsilon_greedy(probs: np.ndarray, epsilon: float, rng: np.random.Generator) -> int:
    if rng.random() < epsilon:
        return int(rng.integers(len(probs)))
    return int(np.argmax(probs))


@dataclass(frozen=True)
class Transition:
    task: str
    features: np.ndarray
    deltas: np.ndarray
    action: int
    action_probs: np.ndarray
    reward: float
    behaviour_prob: float
    next_features: np.ndarray
    next_deltas: np.ndarray
    episode: int = 0
    seq: int = 0

    def __post_init__(self):
        if abs(float(np.sum(self.action_probs)) - 1.0) > 1e-6:
            raise DomainError("action_probs must sum to 1")
        if not 0 <= self.action < len(self.action_probs):
            raise DomainError(f"action {self.action} out of range")
        if not np.isfinite(self.reward):
            raise DomainError(f"non-finite reward {self.reward}")


class ReplayBuffer:
    """Per-task FIFO lists of at most ``capacity`` transitions, drained together."""

    def __init__(self, capacity: int, tasks: Sequence[str] = TASKS):
        if capacity < 1:
            raise DomainError("buffer capacity must be >= 1")
        self.capacity = capacity
        self.tasks = tuple(tasks)
        self._items: OrderedDict[str, list[Transition]] = OrderedDict((t, []) for t in self.tasks)

    def __len__(self) -> int:
        return sum(len(v) for v in self._items.values())

    def count(self, task: str) -> int:
        return len(self._items[task])

    @property
    def ready(self) -> bool:
        return all(len(v) == self.capacity for v in self._items.values())

    def push(self, transition: Transition) -> bool:
        """Append and return whether every task now holds ``capacity`` items."""
        if transition.task not in self._items:
            raise DomainError(f"unknown task {transition.task!r}")
        items = self._items[transition.task]
        if len(items) >= self.capacity:
            raise StateError(f"buffer for {transition.task!r} is full; drain first")
        items.append(transition)
        return self.ready

    def drain(self) -> dict[str, list[Transition]]:
        if not self.ready:
            raise StateError("buffer is not ready to drain")
        out = {t: list(v) for t, v in self._items.items()}
        for v in self._items.values():
            v.clear()
        return out
