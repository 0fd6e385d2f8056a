"""Event data model, session-log ingestion and engagement/adoption aggregation."""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class DomainError(ValueError):
    """Raised when inputs violate an operation's preconditions."""


class DataError(DomainError):
    """Raised for malformed or inconsistent input data (logs, CSV files)."""


@dataclass(frozen=True)
class ViewerSession:
    event_id: str
    viewer_id: str
    join_offset: float
    leave_offset: float
    timezone: str

    def __post_init__(self):
        if not (0.0 <= self.join_offset <= self.leave_offset):
            raise DataError(
                f"session {self.event_id}/{self.viewer_id}: need 0 <= join <= leave, "
                f"got join={self.join_offset}, leave={self.leave_offset}"
            )


@dataclass(frozen=True)
class EventMeta:
    event_id: str
    slot: int
    duration: float
    date_index: int


@dataclass(frozen=True)
class TimezoneVocab:
    names: tuple[str, ...]

    def __post_init__(self):
        if not self.names:
            raise DomainError("timezone vocabulary is empty")
        if len(set(self.names)) != len(self.names):
            raise DomainError("timezone labels must be unique")

    @property
    def size(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise DataError(f"unknown timezone {name!r}") from None


@dataclass(frozen=True, eq=False)
class Event:
    event_id: str
    slot: int
    n: int
    duration: float
    engagement: float
    adoption: float
    z: np.ndarray
    date_index: int

    def __post_init__(self):
        if self.n < 1:
            raise DomainError(f"event {self.event_id}: n must be >= 1")
        if not self.duration > 0:
            raise DomainError(f"event {self.event_id}: duration must be > 0")
        if not 0.0 <= self.engagement <= 1.0:
            raise DomainError(f"event {self.event_id}: engagement {self.engagement} outside [0, 1]")
        if self.adoption < 0:
            raise DomainError(f"event {self.event_id}: adoption must be >= 0")
        z = np.asarray(self.z, dtype=np.float64)
        if np.any(z < 0) or abs(z.sum() - 1.0) > 1e-9:
            raise DomainError(f"event {self.event_id}: z must be a distribution")
        z.setflags(write=False)
        object.__setattr__(self, "z", z)

    def __eq__(self, other):
        if not isinstance(other, Event):
            return NotImplemented
        return (
            self.event_id == other.event_id
            and self.slot == other.slot
            and self.n == other.n
            and self.duration == other.duration
            and self.engagement == other.engagement
            and self.adoption == other.adoption
            and self.date_index == other.date_index
            and np.array_equal(self.z, other.z)
        )

    def replace(self, **changes) -> "Event":
        fields = dict(
            event_id=self.event_id, slot=self.slot, n=self.n, duration=self.duration,
            engagement=self.engagement, adoption=self.adoption, z=self.z,
            date_index=self.date_index,
        )
        fields.update(changes)
        return Event(**fields)


@dataclass(frozen=True)
class EventLog:
    events: tuple[Event, ...]
    vocab: TimezoneVocab
    slot_count: int = 24

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        if self.slot_count < 2:
            raise DomainError("slot_count must be >= 2")
        prev = None
        for e in self.events:
            if len(e.z) != self.vocab.size:
                raise DomainError(f"event {e.event_id}: z has length {len(e.z)}, vocab has {self.vocab.size}")
            if not 0 <= e.slot < self.slot_count:
                raise DomainError(f"event {e.event_id}: slot {e.slot} outside [0, {self.slot_count})")
            if prev is not None and e.date_index <= prev:
                raise DomainError("date_index must strictly increase within an EventLog")
            prev = e.date_index

    def __len__(self) -> int:
        return len(self.events)

    def __getitem__(self, i):
        return self.events[i]

    def __iter__(self):
        return iter(self.events)

    def slice(self, start: int, stop: int) -> "EventLog":
        return EventLog(self.events[start:stop], self.vocab, self.slot_count)

    def engagement(self) -> np.ndarray:
        return np.array([e.engagement for e in self.events])

    def adoption(self) -> np.ndarray:
        return np.array([e.adoption for e in self.events])


def _merged_attendance(intervals: Iterable[tuple[float, float]]) -> float:
    """Total length of the union of ``[join, leave]`` intervals."""
    total = 0.0
    cur_start = cur_end = None
    for a, b in sorted(intervals):
        if cur_end is None or a > cur_end:
            if cur_end is not None:
                total += cur_end - cur_start
            cur_start, cur_end = a, b
        elif b > cur_end:
            cur_end = b
    if cur_end is not None:
        total += cur_end - cur_start
    return total


def _attendance_by_viewer(sessions: Sequence[ViewerSession]) -> dict[str, float]:
    by_viewer: dict[str, list[tuple[float, float]]] = defaultdict(list)
    for s in sessions:
        by_viewer[s.viewer_id].append((s.join_offset, s.leave_offset))
    return {v: _merged_attendance(iv) for v, iv in by_viewer.items()}


def compute_engagement(sessions: Sequence[ViewerSession], duration: float) -> float:
    """Average fraction of the event's duration attended per viewer.

    Repeated sessions of one viewer are merged by interval union, and each
    viewer's attendance is clamped to ``duration``.
    """
    if not sessions:
        raise DomainError("no viewers")
    if not duration > 0:
        raise DomainError(f"duration must be > 0, got {duration}")
    attendance = _attendance_by_viewer(sessions)
    return math.fsum(min(k, duration) / duration for k in attendance.values()) / len(attendance)


def prior_attendance(history: Iterable[ViewerSession]) -> dict[str, int]:
    """Number of distinct events each viewer has a session for."""
    seen: dict[str, set[str]] = defaultdict(set)
    for s in history:
        seen[s.viewer_id].add(s.event_id)
    return {v: len(evs) for v, evs in seen.items()}


def compute_adoption(history: Iterable[ViewerSession], sessions: Sequence[ViewerSession]) -> float:
    """Mean number of earlier events attended by this event's viewers.

    ``history`` holds the sessions of every event strictly before this one.
    """
    return _adoption(prior_attendance(history), sessions)


def _adoption(prior_counts: dict[str, int], sessions: Sequence[ViewerSession]) -> float:
    if not sessions:
        raise DomainError("no viewers")
    viewers = {s.viewer_id for s in sessions}
    return sum(prior_counts.get(v, 0) for v in viewers) / len(viewers)


def aggregate_events(
    sessions: Sequence[ViewerSession],
    event_meta: Sequence[EventMeta],
    *,
    vocab: TimezoneVocab | None = None,
    slot_count: int = 24,
) -> EventLog:
    """Aggregate raw viewer sessions into one :class:`Event` per event id.

    Events are ordered by ``date_index``. When ``vocab`` is omitted it is built
    from the sorted set of timezone labels seen in ``sessions``. A viewer's
    timezone is taken from their first session of the event.
    """
    meta = {}
    for m in event_meta:
        if m.event_id in meta:
            raise DataError(f"duplicate event id {m.event_id!r} in event metadata")
        meta[m.event_id] = m
    by_event: dict[str, list[ViewerSession]] = defaultdict(list)
    for s in sessions:
        if s.event_id not in meta:
            raise DataError(f"session references unknown event {s.event_id!r}")
        by_event[s.event_id].append(s)
    if vocab is None:
        vocab = TimezoneVocab(tuple(sorted({s.timezone for s in sessions})))

    ordered = sorted(meta.values(), key=lambda m: m.date_index)
    prior_counts: dict[str, int] = defaultdict(int)
    events = []
    for m in ordered:
        evs = by_event.get(m.event_id)
        if not evs:
            raise DataError(f"event {m.event_id!r} has no viewer sessions")
        u = compute_engagement(evs, m.duration)
        v = _adoption(prior_counts, evs)
        tz_of: dict[str, str] = {}
        for s in evs:
            tz_of.setdefault(s.viewer_id, s.timezone)
        hist = np.zeros(vocab.size)
        for tz in tz_of.values():
            hist[vocab.index(tz)] += 1
        events.append(Event(
            event_id=m.event_id, slot=m.slot, n=len(tz_of), duration=m.duration,
            engagement=u, adoption=v, z=hist / hist.sum(), date_index=m.date_index,
        ))
        for viewer in tz_of:
            prior_counts[viewer] += 1
    return EventLog(tuple(events), vocab, slot_count)


def split_chronological(
    log: EventLog, fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
) -> tuple[EventLog, EventLog, EventLog]:
    """Contiguous train/val/test slices; floor sizes for train and val, rest to test."""
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise DomainError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    total = len(log)
    if total < 10:
        raise DomainError(f"log too small to split ({total} events, need >= 10)")
    n_train = math.floor(fractions[0] * total + 1e-9)
    n_val = math.floor(fractions[1] * total + 1e-9)
    return (
        log.slice(0, n_train),
        log.slice(n_train, n_train + n_val),
        log.slice(n_train + n_val, total),
    )


# --- CSV interfaces -------------------------------------------------------

SESSION_HEADER = ["event_id", "viewer_id", "join_offset_min", "leave_offset_min", "timezone"]
META_HEADER = ["event_id", "slot", "duration_min", "date_index"]
LOG_HEADER_PREFIX = ["event_id", "date_index", "slot", "n", "duration_min", "engagement", "adoption"]


def _check_header(path: Path, got: list[str] | None, want: list[str]) -> None:
    if got != want:
        raise DataError(f"{path}: expected header {','.join(want)}, got {got}")


def read_sessions(path: str | Path) -> list[ViewerSession]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        _check_header(path, next(reader, None), SESSION_HEADER)
        out = []
        for lineno, row in enumerate(reader, start=2):
            try:
                out.append(ViewerSession(row[0], row[1], float(row[2]), float(row[3]), row[4]))
            except (IndexError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return out


def write_sessions(path: str | Path, sessions: Iterable[ViewerSession]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(SESSION_HEADER)
        for s in sessions:
            w.writerow([s.event_id, s.viewer_id, repr(s.join_offset), repr(s.leave_offset), s.timezone])


def read_event_meta(path: str | Path) -> list[EventMeta]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        _check_header(path, next(reader, None), META_HEADER)
        out = []
        for lineno, row in enumerate(reader, start=2):
            try:
                out.append(EventMeta(row[0], int(row[1]), float(row[2]), int(row[3])))
            except (IndexError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return out


def write_event_meta(path: str | Path, meta: Iterable[EventMeta]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(META_HEADER)
        for m in meta:
            w.writerow([m.event_id, m.slot, repr(m.duration), m.date_index])


def write_event_log(path: str | Path, log: EventLog) -> None:
    """Persist an EventLog as CSV records; timezone labels and slot count go in a comment line."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        fh.write(f"# slot_count={log.slot_count} timezones={'|'.join(log.vocab.names)}\n")
        w = csv.writer(fh)
        w.writerow(LOG_HEADER_PREFIX + [f"z_{i}" for i in range(log.vocab.size)])
        for e in log:
            w.writerow([e.event_id, e.date_index, e.slot, e.n, repr(e.duration),
                        repr(e.engagement), repr(e.adoption)] + [repr(float(x)) for x in e.z])


def read_event_log(path: str | Path) -> EventLog:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        first = fh.readline()
        if not first.startswith("# "):
            raise DataError(f"{path}: missing event-log preamble")
        opts = dict(tok.split("=", 1) for tok in first[2:].split())
        vocab = TimezoneVocab(tuple(opts["timezones"].split("|")))
        reader = csv.reader(fh)
        want = LOG_HEADER_PREFIX + [f"z_{i}" for i in range(vocab.size)]
        _check_header(path, next(reader, None), want)
        events = []
        for lineno, row in enumerate(reader, start=3):
            try:
                events.append(Event(
                    event_id=row[0], date_index=int(row[1]), slot=int(row[2]), n=int(row[3]),
                    duration=float(row[4]), engagement=float(row[5]), adoption=float(row[6]),
                    z=np.array([float(x) for x in row[7:]]),
                ))
            except (IndexError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return EventLog(tuple(events), vocab, int(opts["slot_count"]))
