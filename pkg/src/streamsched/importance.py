"""Per-transition task weights from gated-transformer embeddings of buffered states."""
from __future__ import annotations

from typing import Sequence

import torch
from torch import nn

from .events import DomainError
from .nn import MLP, GTrXL


class TaskImportance(nn.Module):
    """Embedding network (GTrXL) plus a scorer MLP mapping each embedding row to a scalar."""

    def __init__(self, state_dim: int, model_dim: int = 32, layers: int = 2, heads: int = 2,
                 hidden: int = 32, axis: str = "tasks", seed: int = 0):
        super().__init__()
        if axis not in ("tasks", "rows"):
            raise DomainError(f"importance axis must be 'tasks' or 'rows', got {axis!r}")
        self.axis = axis
        self.embed = GTrXL(state_dim, model_dim, layers=layers, heads=heads, seed=seed)
        self.scorer = MLP([model_dim, hidden, 1], ["sigmoid", "identity"], seed=seed + 1)

    def forward(self, state_batches: Sequence[torch.Tensor]) -> torch.Tensor:
        return compute_weight_matrix(compute_task_embeddings(state_batches, self.embed), self.scorer, self.axis)


def compute_task_embeddings(state_batches: Sequence[torch.Tensor], embed: GTrXL) -> list[torch.Tensor]:
    """Encode each task's ``(l_b, d_s)`` state sequence with the same network."""
    lengths = {b.shape[0] for b in state_batches}
    if len(lengths) != 1:
        raise DomainError(f"task batches differ in length: {sorted(lengths)}")
    return [embed(b) for b in state_batches]


def compute_weight_matrix(embeddings: Sequence[torch.Tensor], scorer: MLP, axis: str = "tasks") -> torch.Tensor:
    """``(l_b, |T|)`` weights; softmax across tasks per row, or across rows per task."""
    shapes = {tuple(y.shape) for y in embeddings}
    if len(shapes) != 1:
        raise DomainError(f"embeddings differ in shape: {sorted(shapes)}")
    scores = torch.cat([scorer(y) for y in embeddings], dim=1)
    return torch.softmax(scores, dim=1 if axis == "tasks" else 0)
