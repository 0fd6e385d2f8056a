import numpy as np
import pytest

from streamsched.emulator import EmulatorConfig, fit_behaviour_model
from streamsched.events import Event, EventLog, TimezoneVocab, aggregate_events, split_chronological
from streamsched.synthetic import SynthConfig, degenerate_config, generate_synthetic


def make_event(i, slot=0, n=10, duration=60.0, u=0.5, v=1.0, z=(1.0,), date=None):
    return Event(f"e{i}", slot, n, duration, u, v, np.asarray(z, dtype=float), i if date is None else date)


def make_log(count, slot_count=24, **kw):
    vocab = TimezoneVocab(tuple(f"tz{i}" for i in range(len(kw.get("z", (1.0,))))))
    return EventLog(tuple(make_event(i, slot=i % slot_count, **kw) for i in range(count)), vocab, slot_count)


@pytest.fixture(scope="session")
def synthetic_log():
    sessions, meta, truth = generate_synthetic(SynthConfig(n_viewers=300, n_events=60), 3)
    return aggregate_events(sessions, meta, vocab=truth.vocab)


@pytest.fixture(scope="session")
def degenerate_env():
    """Log where every viewer prefers slot 9, plus an emulator fitted on its train split."""
    sessions, meta, truth = generate_synthetic(degenerate_config(), 1)
    log = aggregate_events(sessions, meta, vocab=truth.vocab)
    train, _, test = split_chronological(log)
    model = fit_behaviour_model(train, EmulatorConfig(window=5, seed=0))
    return train, test, model
