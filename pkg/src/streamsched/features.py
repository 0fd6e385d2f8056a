"""Event featurization shared by the emulator and the agent."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .events import DomainError, Event, EventLog


@dataclass(frozen=True)
class NormStats:
    """Min-max statistics frozen from a training split."""

    slot_count: int
    n_timezones: int
    n_min: float
    n_max: float
    m_min: float
    m_max: float
    v_min: float
    v_max: float
    median_gap: float = 1.0

    @classmethod
    def from_log(cls, log: EventLog) -> "NormStats":
        if len(log) == 0:
            raise DomainError("cannot compute normalization statistics from an empty log")
        n = np.array([e.n for e in log], dtype=np.float64)
        m = np.array([e.duration for e in log])
        v = log.adoption()
        gaps = np.diff([e.date_index for e in log])
        return cls(
            slot_count=log.slot_count, n_timezones=log.vocab.size,
            n_min=float(n.min()), n_max=float(n.max()),
            m_min=float(m.min()), m_max=float(m.max()),
            v_min=float(v.min()), v_max=float(v.max()),
            median_gap=float(np.median(gaps)) if gaps.size else 1.0,
        )

    @property
    def feature_dim(self) -> int:
        return 5 + self.n_timezones

    def to_dict(self) -> dict:
        return asdict(self)


def _scale(x: float, lo: float, hi: float) -> float:
    if hi <= lo:
        return 0.0
    return min(max((x - lo) / (hi - lo), 0.0), 1.0)


def build_feature(event: Optional[Event], prev_event: Optional[Event], stats: NormStats):
    """Feature vector and day gap for one event; ``None`` is the padding event.

    Layout: ``[slot, n, duration, engagement, adoption, z...]`` with slot scaled
    by ``slot_count - 1`` and n, duration, adoption min-max scaled and clamped.
    """
    x = np.zeros(stats.feature_dim)
    if event is None:
        return x, 0.0
    x[0] = event.slot / (stats.slot_count - 1)
    x[1] = _scale(event.n, stats.n_min, stats.n_max)
    x[2] = _scale(event.duration, stats.m_min, stats.m_max)
    x[3] = event.engagement
    x[4] = _scale(event.adoption, stats.v_min, stats.v_max)
    x[5:] = event.z
    delta = 0.0 if prev_event is None else float(event.date_index - prev_event.date_index)
    return x, delta


def featurize_window(window: Sequence[Optional[Event]], stats: NormStats):
    """Stack features of an l-window; returns ``(features (l, d_x), deltas (l,))``.

    The first delta is always 0 and a pad resets the gap of its successor.
    """
    feats = np.zeros((len(window), stats.feature_dim))
    deltas = np.zeros(len(window))
    prev = None
    for i, e in enumerate(window):
        feats[i], deltas[i] = build_feature(e, prev, stats)
        prev = e
    return feats, deltas


def history_window(log: EventLog, end: int, length: int) -> tuple[Optional[Event], ...]:
    """The ``length`` events ending at index ``end`` (inclusive), left-padded with ``None``."""
    start = end - length + 1
    pads = max(0, -start)
    return (None,) * pads + tuple(log.events[max(start, 0):end + 1])
