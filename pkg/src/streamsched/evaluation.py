"""Off-policy scoring with capped, normalized importance ratios, plus report files."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .agent import ADOPTION, ENGAGEMENT
from .emulator import BehaviourModel, reset, step
from .events import DomainError, EventLog

log = logging.getLogger(__name__)

NCIS_MODES = ("stepwise", "trajectory")


@dataclass(frozen=True)
class TrajectoryRecord:
    target_probs: np.ndarray
    behaviour_probs: np.ndarray
    engagement: np.ndarray
    adoption: np.ndarray

    def __post_init__(self):
        arrays = [np.asarray(a, dtype=np.float64) for a in
                  (self.target_probs, self.behaviour_probs, self.engagement, self.adoption)]
        if len({a.shape for a in arrays}) != 1 or arrays[0].ndim != 1 or arrays[0].size == 0:
            raise DomainError("trajectory arrays must be non-empty 1-d and equally long")
        for name, a in zip(("target", "behaviour"), arrays[:2]):
            if np.any(a <= 0) or np.any(a > 1):
                raise DomainError(f"{name} probabilities must lie in (0, 1]")
        for name, a in zip(("target_probs", "behaviour_probs", "engagement", "adoption"), arrays):
            object.__setattr__(self, name, a)

    def __len__(self) -> int:
        return len(self.engagement)

    def rewards(self, task: str) -> np.ndarray:
        if task == ENGAGEMENT:
            return self.engagement
        if task == ADOPTION:
            return self.adoption
        raise DomainError(f"unknown task {task!r}")


def capped_log_weights(traj: TrajectoryRecord, delta: float, mode: str = "stepwise") -> np.ndarray:
    """``log min(delta, prod ratio)`` per step; the product runs to t (stepwise) or to T (trajectory)."""
    if not delta > 0:
        raise DomainError(f"delta must be positive, got {delta}")
    if mode not in NCIS_MODES:
        raise DomainError(f"mode must be one of {NCIS_MODES}, got {mode!r}")
    log_ratio = np.log(traj.target_probs) - np.log(traj.behaviour_probs)
    cum = np.cumsum(log_ratio)
    if mode == "trajectory":
        cum = np.full_like(cum, cum[-1])
    return np.minimum(math.log(delta), cum)


def ncis(traj: TrajectoryRecord, task: str, delta: float = 10.0, mode: str = "stepwise") -> float:
    """Capped-ratio weighted mean of the task reward over the trajectory."""
    r = traj.rewards(task)
    lw = capped_log_weights(traj, delta, mode)
    # weights only enter as a ratio, so shift by the max before exponentiating
    w = np.exp(lw - lw.max())
    return math.fsum(w * r) / math.fsum(w)


class Policy(Protocol):
    slot_count: int
    window: int

    def action_probs(self, window) -> np.ndarray: ...


class UniformPolicy:
    """Samples slots uniformly; the random baseline."""

    stochastic = True

    def __init__(self, slot_count: int, window: int):
        self.slot_count = slot_count
        self.window = window

    def action_probs(self, window) -> np.ndarray:
        return np.full(self.slot_count, 1.0 / self.slot_count)


class BehaviourPolicy:
    """Samples from the emulator's behaviour head, so target and behaviour coincide."""

    stochastic = True

    def __init__(self, model: BehaviourModel):
        self.model = model
        self.slot_count = model.slot_count
        self.window = model.window

    def action_probs(self, window) -> np.ndarray:
        return self.model.slot_probs(window)


@dataclass
class MetricsRecord:
    eng_ncis: float
    ad_ncis: float
    per_trial: list[dict]
    delta: float
    trials: int
    seed_list: list[int]
    config_hash: str
    mode: str = "stepwise"
    horizon: int = 200

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsRecord":
        return cls(**data)


def config_hash(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


def rollout(policy: Policy, env_model: BehaviourModel, test_log: EventLog, seed: int, horizon: int) -> TrajectoryRecord:
    """One episode from a random test event. Greedy unless the policy is marked stochastic."""
    rng = np.random.default_rng(seed)
    state = reset(env_model, test_log, rng, horizon=horizon)
    stochastic = getattr(policy, "stochastic", False)
    tp, bp, eng, ad = [], [], [], []
    while not state.done:
        probs = np.asarray(policy.action_probs(state.window), dtype=np.float64)
        action = int(rng.choice(len(probs), p=probs)) if stochastic else int(np.argmax(probs))
        state, res = step(state, action, env_model)
        tp.append(probs[action])
        bp.append(res.behaviour_prob)
        eng.append(res.reward_engagement)
        ad.append(res.reward_adoption)
    return TrajectoryRecord(np.array(tp), np.array(bp), np.array(eng), np.array(ad))


def evaluate(
    policy: Policy,
    env_model: BehaviourModel,
    test_log: EventLog,
    trials: int = 5,
    delta: float = 10.0,
    seed: int = 0,
    *,
    horizon: int = 200,
    mode: str = "stepwise",
) -> MetricsRecord:
    """Mean engagement and adoption NCIS over ``trials`` rollouts seeded ``seed + i``."""
    if trials < 1:
        raise DomainError("trials must be >= 1")
    if policy.slot_count != env_model.slot_count:
        raise DomainError(f"policy has {policy.slot_count} slots, emulator {env_model.slot_count}")
    if policy.window != env_model.window:
        raise DomainError(f"policy window {policy.window} != emulator window {env_model.window}")
    seeds = [seed + i for i in range(trials)]
    per_trial = []
    for i, s in enumerate(seeds):
        traj = rollout(policy, env_model, test_log, s, horizon)
        per_trial.append({
            "trial": i, "seed": s,
            "eng_ncis": ncis(traj, ENGAGEMENT, delta, mode),
            "ad_ncis": ncis(traj, ADOPTION, delta, mode),
            "mean_engagement": float(np.mean(traj.engagement)),
            "mean_adoption": float(np.mean(traj.adoption)),
        })
    cfg = getattr(policy, "config", None)
    payload = {
        "policy": type(policy).__name__,
        "config": asdict(cfg) if cfg is not None else None,
        "emulator": asdict(env_model.config),
        "delta": delta, "mode": mode, "horizon": horizon, "seeds": seeds,
    }
    return MetricsRecord(
        eng_ncis=float(np.mean([t["eng_ncis"] for t in per_trial])),
        ad_ncis=float(np.mean([t["ad_ncis"] for t in per_trial])),
        per_trial=per_trial, delta=float(delta), trials=trials, seed_list=seeds,
        config_hash=config_hash(payload), mode=mode, horizon=horizon,
    )


def plot_curves(curves: Sequence[dict], path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    tasks = sorted({r["task"] for r in curves})
    fig, axes = plt.subplots(1, len(tasks), figsize=(5 * len(tasks), 3.5), squeeze=False)
    for ax, task in zip(axes[0], tasks):
        rows = [r for r in curves if r["task"] == task]
        ax.plot([r["episode"] for r in rows], [r["mean_reward"] for r in rows])
        ax.set_xlabel("episode")
        ax.set_ylabel(f"{task} reward")
        ax.set_title(task)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def report(metrics: MetricsRecord | None, curves: Sequence[dict], out_dir: str | Path) -> list[Path]:
    """Write ``metrics.json``, ``curves.csv`` and ``reward_curves.png``; returns written paths."""
    from .learner import write_curves

    out = Path(out_dir)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        if metrics is not None:
            p = out / "metrics.json"
            p.write_text(json.dumps(metrics.to_dict(), indent=2, sort_keys=True))
            written.append(p)
        p = out / "curves.csv"
        write_curves(p, curves)
        written.append(p)
        if curves:
            p = out / "reward_curves.png"
            plot_curves(curves, p)
            written.append(p)
        else:
            log.warning("no training curves; skipping plot")
    except OSError as exc:
        raise OSError(f"writing report to {out}: {exc}") from exc
    return written


def read_metrics(path: str | Path) -> MetricsRecord:
    return MetricsRecord.from_dict(json.loads(Path(path).read_text()))
