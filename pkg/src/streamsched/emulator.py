"""Behavioural-policy emulator and the episodic environment built on it.

The emulator reads a window of ``l`` events and has three heads: the slot the
historical scheduler picked next, and the engagement and adoption that the
next event obtains when it is scheduled at a given candidate slot.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .events import DomainError, Event, EventLog
from .features import NormStats, featurize_window, history_window
from .nn import MLP
from .nn._init import DTYPE, make_generator, uniform_param
from .serialization import load_state_arrays, read_arrays, state_dict_arrays, write_arrays

PROB_FLOOR = 1e-6
MODEL_MAGIC = b"SSBHV"
MODEL_VERSION = 1


class StateError(RuntimeError):
    """Raised when an environment is driven out of order."""


@dataclass
class EmulatorConfig:
    window: int = 15
    hidden: int = 64
    # circular Fourier harmonics used to encode the candidate slot
    slot_harmonics: int = 4
    epochs: int = 200
    lr: float = 0.01
    # L2 penalty on the slot head weights
    slot_l2: float = 0.1
    seed: int = 0


class BehaviourModel(nn.Module):
    def __init__(self, stats: NormStats, config: EmulatorConfig):
        super().__init__()
        self.stats = stats
        self.config = config
        self.losses: dict[str, float] = {}
        d_x, d_a, hid = stats.feature_dim, stats.slot_count, config.hidden
        self.trunk = MLP([2 * d_x, hid, hid], ["relu", "relu"], seed=config.seed)
        gen = make_generator(config.seed + 1)
        self.W_slot = uniform_param((hid, d_a), hid, gen)
        self.b_slot = uniform_param((d_a,), hid, gen)
        self.reward = MLP([hid + 2 * config.slot_harmonics, hid, 2], ["relu", "identity"], seed=config.seed + 2)

    @property
    def window(self) -> int:
        return self.config.window

    @property
    def slot_count(self) -> int:
        return self.stats.slot_count

    def encode(self, feats: torch.Tensor) -> torch.Tensor:
        """``(B, l, d_x)`` windows -> ``(B, hidden)``; pooled mean plus the last event."""
        return self.trunk(torch.cat([feats.mean(dim=1), feats[:, -1]], dim=-1))

    def slot_logits(self, hidden: torch.Tensor) -> torch.Tensor:
        return hidden @ self.W_slot + self.b_slot

    def slot_encoding(self, slots: torch.Tensor) -> torch.Tensor:
        k = torch.arange(1, self.config.slot_harmonics + 1, dtype=DTYPE)
        angle = 2 * torch.pi * slots.to(DTYPE)[..., None] * k / self.slot_count
        return torch.cat([torch.cos(angle), torch.sin(angle)], dim=-1)

    def reward_outputs(self, hidden: torch.Tensor, slots: torch.Tensor):
        out = self.reward(torch.cat([hidden, self.slot_encoding(slots)], dim=-1))
        return torch.sigmoid(out[..., 0]), F.softplus(out[..., 1])

    def _hidden(self, window) -> torch.Tensor:
        feats, _ = featurize_window(window, self.stats)
        with torch.no_grad():
            return self.encode(torch.from_numpy(feats)[None])

    def slot_probs(self, window) -> np.ndarray:
        """Behaviour policy over slots for the event after ``window``, floored at 1e-6."""
        with torch.no_grad():
            p = torch.softmax(self.slot_logits(self._hidden(window)), dim=-1)[0].numpy()
        p = np.maximum(p, PROB_FLOOR)
        return p / p.sum()

    def predict_rewards(self, window, slots) -> tuple[np.ndarray, np.ndarray]:
        """Predicted (engagement, adoption) of the next event for each candidate slot."""
        slots = torch.as_tensor(np.atleast_1d(slots), dtype=torch.long)
        if torch.any(slots < 0) or torch.any(slots >= self.slot_count):
            raise DomainError(f"slot out of range [0, {self.slot_count})")
        h = self._hidden(window)
        with torch.no_grad():
            u, v = self.reward_outputs(h.expand(len(slots), -1), slots)
        return u.numpy(), v.numpy()


def _training_tensors(log: EventLog, stats: NormStats, window: int):
    feats, slots, u, v = [], [], [], []
    for j in range(1, len(log)):
        f, _ = featurize_window(history_window(log, j - 1, window), stats)
        feats.append(f)
        target = log[j]
        slots.append(target.slot)
        u.append(target.engagement)
        v.append(target.adoption)
    return (torch.from_numpy(np.stack(feats)), torch.tensor(slots),
            torch.tensor(u, dtype=DTYPE), torch.tensor(v, dtype=DTYPE))


def fit_behaviour_model(train_log: EventLog, config: EmulatorConfig | None = None) -> BehaviourModel:
    """Fit the three heads by full-batch Adam.

    Every event after the first is a target; its window is the ``l`` events
    before it, left-padded. Engagement and adoption use squared error with the
    observed slot as the candidate. The slot head uses cross-entropy plus an L2
    penalty and reads the encoder output without training it, which keeps the
    behaviour policy from memorizing individual training windows.
    """
    config = config or EmulatorConfig()
    if len(train_log) < config.window + 1:
        raise DomainError(f"log has {len(train_log)} events, need at least window + 1 = {config.window + 1}")
    stats = NormStats.from_log(train_log)
    model = BehaviourModel(stats, config)
    feats, slots, u, v = _training_tensors(train_log, stats, config.window)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    for _ in range(config.epochs):
        opt.zero_grad()
        h = model.encode(feats)
        pu, pv = model.reward_outputs(h, slots)
        loss_u = F.mse_loss(pu, u)
        loss_v = F.mse_loss(pv, v)
        loss_h = F.cross_entropy(model.slot_logits(h.detach()), slots)
        penalty = config.slot_l2 * (model.W_slot**2).sum()
        (loss_u + loss_v + loss_h + penalty).backward()
        opt.step()
    with torch.no_grad():
        h = model.encode(feats)
        pu, pv = model.reward_outputs(h, slots)
        model.losses = {
            "engagement_mse": float(F.mse_loss(pu, u)),
            "adoption_mse": float(F.mse_loss(pv, v)),
            "slot_xent": float(F.cross_entropy(model.slot_logits(h), slots)),
        }
    for p in model.parameters():
        p.requires_grad_(False)
    return model


@dataclass(frozen=True)
class EnvState:
    window: tuple[Optional[Event], ...]
    step: int
    horizon: int
    start_index: int

    @property
    def done(self) -> bool:
        return self.step >= self.horizon


@dataclass(frozen=True)
class StepResult:
    next_event: Event
    reward_engagement: float
    reward_adoption: float
    behaviour_prob: float
    done: bool


def reset(model: BehaviourModel, log: EventLog, seed, horizon: int = 200) -> EnvState:
    """Start an episode at an event drawn uniformly from ``log``."""
    if len(log) == 0:
        raise DomainError("cannot reset on an empty log")
    if horizon < 1:
        raise DomainError("horizon must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = int(rng.integers(len(log)))
    return EnvState(history_window(log, idx, model.window), 0, horizon, idx)


def step(state: EnvState, action_slot: int, model: BehaviourModel) -> tuple[EnvState, StepResult]:
    if state.done:
        raise StateError("episode finished; call reset")
    if not 0 <= action_slot < model.slot_count:
        raise DomainError(f"slot {action_slot} outside [0, {model.slot_count})")
    u, v = model.predict_rewards(state.window, [action_slot])
    u, v = float(u[0]), float(v[0])
    probs = model.slot_probs(state.window)
    last = state.window[-1]
    gap = max(1, int(round(model.stats.median_gap)))
    nxt = last.replace(
        event_id=f"sim{state.start_index}-{state.step + 1}", slot=int(action_slot),
        engagement=u, adoption=v, date_index=last.date_index + gap,
    )
    new_state = EnvState(state.window[1:] + (nxt,), state.step + 1, state.horizon, state.start_index)
    return new_state, StepResult(nxt, u, v, float(probs[action_slot]), new_state.done)


# --- persistence ----------------------------------------------------------

def save_behaviour_model(model: BehaviourModel, path: str | Path) -> None:
    path = Path(path)
    header = {"stats": model.stats.to_dict(), "config": asdict(model.config)}
    write_arrays(path, MODEL_MAGIC, MODEL_VERSION, header, state_dict_arrays(model))
    sidecar = {"config": asdict(model.config), "losses": model.losses, "stats": model.stats.to_dict()}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))


def load_behaviour_model(path: str | Path) -> BehaviourModel:
    path = Path(path)
    _, header, arrays = read_arrays(path, MODEL_MAGIC, MODEL_VERSION)
    model = BehaviourModel(NormStats(**header["stats"]), EmulatorConfig(**header["config"]))
    load_state_arrays(model, arrays)
    sidecar = path.with_suffix(".json")
    if sidecar.exists():
        model.losses = json.loads(sidecar.read_text()).get("losses", {})
    for p in model.parameters():
        p.requires_grad_(False)
    return model
