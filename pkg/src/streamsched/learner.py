"""Q approximation, the joint policy/learner losses and episodic training."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .agent import ADOPTION, ENGAGEMENT, ReplayBuffer, Transition, action_distribution, epsilon_greedy
from .emulator import BehaviourModel, reset, step
from .events import DomainError, EventLog
from .features import NormStats, featurize_window
from .importance import TaskImportance
from .nn import MLP, TimeLSTM
from .nn._init import DTYPE
from .serialization import load_state_arrays, read_arrays, state_dict_arrays, write_arrays

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
CHECKPOINT_MAGIC = b"SSAGENT"
CHECKPOINT_VERSION = 1
TASK_SETS = {
    "both": (ENGAGEMENT, ADOPTION),
    "engagement-only": (ENGAGEMENT,),
    "adoption-only": (ADOPTION,),
}
POLICY_GROUPS = ("w", "theta")
LEARNER_GROUPS = ("eta", "omega", "zeta")


class NumericError(RuntimeError):
    """Non-finite loss or gradient during training."""


@dataclass
class LearnerConfig:
    lr: float = 0.001
    gamma: float = 0.92
    epsilon: float = 0.1
    window: int = 15
    buffer_size: int = 128
    state_dim: int = 128
    episodes: int = 300
    horizon: int = 200
    tasks: str = "both"
    seed: int = 0
    actor_hidden: int = 64
    critic_hidden: int = 64
    model_dim: int = 32
    gtrxl_layers: int = 2
    gtrxl_heads: int = 2
    importance_hidden: int = 32
    lstm_activation: str = "sigmoid"
    importance_axis: str = "tasks"
    target: str = "immediate"
    q_action: str = "probs"
    actor_mode: str = "shared"

    def validate(self) -> None:
        for name in ("lr", "window", "buffer_size", "state_dim", "episodes", "horizon"):
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive")
        if not 0 <= self.gamma <= 1 or not 0 <= self.epsilon <= 1:
            raise DomainError("gamma and epsilon must lie in [0, 1]")
        choices = {
            "tasks": TASK_SETS, "lstm_activation": ("sigmoid", "tanh"),
            "importance_axis": ("tasks", "rows"), "target": ("immediate", "n_step"),
            "q_action": ("probs", "onehot"), "actor_mode": ("shared", "per_task_heads"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise DomainError(f"{name} must be one of {sorted(allowed)}, got {getattr(self, name)!r}")

    @property
    def task_list(self) -> tuple[str, ...]:
        return TASK_SETS[self.tasks]

    @classmethod
    def from_dict(cls, data: Mapping) -> "LearnerConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


class MultiTaskAgent(nn.Module):
    """Parameter groups: encoder ``w``, actor ``theta``, importance ``eta``/``omega``, critic ``zeta``."""

    def __init__(self, config: LearnerConfig, feature_dim: int, slot_count: int):
        super().__init__()
        c, seed = config, config.seed
        self.config = config
        self.slot_count = slot_count
        self.encoder = TimeLSTM(feature_dim, c.state_dim, seed=seed * 7 + 1, activation=c.lstm_activation)
        n_heads = len(c.task_list) if c.actor_mode == "per_task_heads" else 1
        self.actors = nn.ModuleList(
            MLP([c.state_dim, c.actor_hidden, slot_count], ["relu", "softmax"], seed=seed * 7 + 2 + 100 * i)
            for i in range(n_heads)
        )
        self.importance = TaskImportance(
            c.state_dim, c.model_dim, c.gtrxl_layers, c.gtrxl_heads, c.importance_hidden,
            axis=c.importance_axis, seed=seed * 7 + 3,
        )
        self.critic = MLP([c.state_dim + slot_count, c.critic_hidden, 1], ["relu", "identity"], seed=seed * 7 + 5)

    def groups(self) -> dict[str, list[nn.Parameter]]:
        return {
            "w": list(self.encoder.parameters()),
            "theta": list(self.actors.parameters()),
            "eta": list(self.importance.embed.parameters()),
            "omega": list(self.importance.scorer.parameters()),
            "zeta": list(self.critic.parameters()),
        }

    def actor_for(self, task: str) -> MLP:
        if len(self.actors) == 1:
            return self.actors[0]
        return self.actors[self.config.task_list.index(task)]

    def common_probs(self, state: torch.Tensor) -> torch.Tensor:
        probs = [action_distribution(state, a) for a in self.actors]
        return probs[0] if len(probs) == 1 else torch.stack(probs).mean(dim=0)


def q_value(state: torch.Tensor, action: torch.Tensor, critic: MLP) -> torch.Tensor:
    """Critic output on the concatenation ``state ⊕ action``; batched over leading dims."""
    if state.shape[-1] + action.shape[-1] != critic.in_dim:
        raise DomainError(
            f"critic expects {critic.in_dim} inputs, got {state.shape[-1]} + {action.shape[-1]}"
        )
    return critic(torch.cat([state, action], dim=-1)).squeeze(-1)


def policy_loss(log_probs: torch.Tensor, advantages: torch.Tensor) -> torch.Tensor:
    """``-mean(log pi * advantage)`` with the advantage held constant.

    Both tensors are ``(|T|, l_b)``.
    """
    return -(log_probs * advantages.detach()).mean()


def learner_loss(targets: torch.Tensor, weights: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Mean squared error between targets and importance-weighted Q, all ``(|T|, l_b)``."""
    if not torch.isfinite(targets).all():
        raise DomainError("non-finite reward in batch")
    return ((targets - weights * q) ** 2).mean()


def discounted_targets(batch: Sequence[Transition], gamma: float) -> np.ndarray:
    """Discounted sum of later rewards in the same episode, truncated at the batch end."""
    out = np.zeros(len(batch))
    acc = 0.0
    for k in range(len(batch) - 1, -1, -1):
        if k + 1 < len(batch) and batch[k + 1].episode != batch[k].episode:
            acc = 0.0
        acc = batch[k].reward + gamma * acc
        out[k] = acc
    return out


@dataclass
class BatchLosses:
    policy: torch.Tensor
    learner: torch.Tensor
    weights: torch.Tensor
    advantage: torch.Tensor
    floor_hits: int


def compute_losses(agent: MultiTaskAgent, batches: Mapping[str, Sequence[Transition]]) -> BatchLosses:
    """Both joint losses for one drained buffer, tasks in ``agent.config.task_list`` order."""
    c = agent.config
    tasks = c.task_list
    log_probs, states, actions, targets = [], [], [], []
    floor_hits = 0
    for task in tasks:
        batch = batches[task]
        feats = torch.from_numpy(np.stack([t.features for t in batch]))
        deltas = torch.from_numpy(np.stack([t.deltas for t in batch]))
        s = agent.encoder(feats, deltas)
        probs = action_distribution(s, agent.actor_for(task))
        idx = torch.tensor([t.action for t in batch])
        chosen = probs.gather(1, idx[:, None]).squeeze(1)
        floor_hits += int((chosen <= PROB_FLOOR).sum())
        log_probs.append(torch.log(chosen.clamp_min(PROB_FLOOR)))
        states.append(s.detach())
        if c.q_action == "probs":
            actions.append(probs.detach())
        else:
            actions.append(torch.nn.functional.one_hot(idx, agent.slot_count).to(DTYPE))
        if c.target == "immediate":
            targets.append(torch.tensor([t.reward for t in batch], dtype=DTYPE))
        else:
            targets.append(torch.from_numpy(discounted_targets(batch, c.gamma)))

    weights = agent.importance(states).T  # (|T|, l_b)
    q = torch.stack([q_value(s, a, agent.critic) for s, a in zip(states, actions)])
    r = torch.stack(targets)
    advantage = r - weights * q
    return BatchLosses(
        policy=policy_loss(torch.stack(log_probs), advantage),
        learner=learner_loss(r, weights, q),
        weights=weights.detach(),
        advantage=advantage.detach(),
        floor_hits=floor_hits,
    )


class Optimizers:
    """One Adam per loss: policy loss drives ``w, theta``; learner loss drives ``eta, omega, zeta``."""

    def __init__(self, agent: MultiTaskAgent, lr: float):
        g = agent.groups()
        self.policy_params = [p for name in POLICY_GROUPS for p in g[name]]
        self.learner_params = [p for name in LEARNER_GROUPS for p in g[name]]
        kw = dict(lr=lr, betas=(0.9, 0.999), eps=1e-8)
        self.policy = torch.optim.Adam(self.policy_params, **kw)
        self.learner = torch.optim.Adam(self.learner_params, **kw)

    def state_dict(self) -> dict:
        return {"policy": self.policy.state_dict(), "learner": self.learner.state_dict()}

    def load_state_dict(self, state: dict) -> None:
        self.policy.load_state_dict(state["policy"])
        self.learner.load_state_dict(state["learner"])


def apply_updates(losses: BatchLosses, optimizers: Optimizers, routes: Sequence[str] = ("policy", "learner")) -> None:
    """Route each loss's gradient to its own parameter groups and take one Adam step each.

    ``routes`` selects which of the two steps to take. Raises
    :class:`NumericError` without touching parameters if any selected loss or
    gradient is non-finite.
    """
    table = {
        "policy": (losses.policy, optimizers.policy_params, optimizers.policy),
        "learner": (losses.learner, optimizers.learner_params, optimizers.learner),
    }
    unknown = set(routes) - set(table)
    if unknown:
        raise DomainError(f"unknown update routes {sorted(unknown)}")
    for name in routes:
        if not torch.isfinite(table[name][0]):
            raise NumericError(f"non-finite {name} loss: {table[name][0].item()}")
    grads = {}
    for k, name in enumerate(routes):
        loss, params, _ = table[name]
        grads[name] = torch.autograd.grad(loss, params, retain_graph=k + 1 < len(routes), allow_unused=True)
        if any(g is not None and not torch.isfinite(g).all() for g in grads[name]):
            raise NumericError(f"non-finite gradient from the {name} loss")
    for name in routes:
        _, params, opt = table[name]
        for p, g in zip(params, grads[name]):
            p.grad = torch.zeros_like(p) if g is None else g
        opt.step()
        for p in params:
            p.grad = None


@dataclass
class TrainedAgent:
    agent: MultiTaskAgent
    stats: NormStats
    config: LearnerConfig
    curves: list[dict] = field(default_factory=list)
    update_losses: list[tuple[float, float]] = field(default_factory=list)
    optimizers: Optimizers | None = None

    @property
    def slot_count(self) -> int:
        return self.agent.slot_count

    @property
    def window(self) -> int:
        return self.config.window

    def action_probs(self, window) -> np.ndarray:
        feats, deltas = featurize_window(window, self.stats)
        with torch.no_grad():
            s = self.agent.encoder(torch.from_numpy(feats), torch.from_numpy(deltas))
            return self.agent.common_probs(s).numpy()


def _episode_row(episode: int, task: str, rewards: list[float], gamma: float, losses: list[tuple[float, float]]):
    disc = sum(gamma**t * r for t, r in enumerate(rewards))
    row = {
        "episode": episode, "task": task,
        "mean_reward": float(np.mean(rewards)), "discounted_return": float(disc),
        "loss_policy": float(np.mean([l[0] for l in losses])) if losses else math.nan,
        "loss_learner": float(np.mean([l[1] for l in losses])) if losses else math.nan,
    }
    return row


def train(
    config: LearnerConfig,
    env_model: BehaviourModel,
    train_log: EventLog,
    *,
    on_update: Callable[[MultiTaskAgent, BatchLosses], None] | None = None,
) -> TrainedAgent:
    """Episodic training against the emulator.

    Each task runs its own environment copy. Every step each task encodes its
    window, picks a slot epsilon-greedily, steps and pushes the transition; a
    full buffer is drained into one joint update. Randomness comes from
    ``config.seed`` only: parameter init, one exploration stream and one reset
    stream per task.
    """
    config.validate()
    if config.window != env_model.window:
        raise DomainError(f"agent window {config.window} != emulator window {env_model.window}")
    tasks = config.task_list
    stats = env_model.stats
    agent = MultiTaskAgent(config, stats.feature_dim, stats.slot_count)
    optimizers = Optimizers(agent, config.lr)
    buffer = ReplayBuffer(config.buffer_size, tasks)
    explore_rng = np.random.default_rng([config.seed, 1])
    reset_rngs = {t: np.random.default_rng([config.seed, 2, i]) for i, t in enumerate(tasks)}
    result = TrainedAgent(agent, stats, config, optimizers=optimizers)
    seq = 0

    for episode in range(config.episodes):
        env = {t: reset(env_model, train_log, reset_rngs[t], horizon=config.horizon) for t in tasks}
        rewards = {t: [] for t in tasks}
        episode_losses: list[tuple[float, float]] = []
        for _ in range(config.horizon):
            for task in tasks:
                state = env[task]
                feats, deltas = featurize_window(state.window, stats)
                with torch.no_grad():
                    s = agent.encoder(torch.from_numpy(feats), torch.from_numpy(deltas))
                    probs = action_distribution(s, agent.actor_for(task)).numpy()
                action = epsilon_greedy(probs, config.epsilon, explore_rng)
                nxt, res = step(state, action, env_model)
                reward = res.reward_engagement if task == ENGAGEMENT else res.reward_adoption
                next_feats, next_deltas = featurize_window(nxt.window, stats)
                env[task] = nxt
                rewards[task].append(reward)
                ready = buffer.push(Transition(
                    task, feats, deltas, action, probs, reward, res.behaviour_prob,
                    next_feats, next_deltas, episode=episode, seq=seq,
                ))
                seq += 1
            if ready:
                losses = compute_losses(agent, buffer.drain())
                if losses.floor_hits:
                    log.warning("probability floor hit %d times in update", losses.floor_hits)
                try:
                    apply_updates(losses, optimizers)
                except NumericError as exc:
                    raise NumericError(f"episode {episode}: {exc}") from exc
                pair = (losses.policy.item(), losses.learner.item())
                episode_losses.append(pair)
                result.update_losses.append(pair)
                if on_update is not None:
                    on_update(agent, losses)
        for task in tasks:
            result.curves.append(_episode_row(episode, task, rewards[task], config.gamma, episode_losses))
    return result


# --- checkpoints and curves ------------------------------------------------

CURVE_FIELDS = ["episode", "task", "mean_reward", "discounted_return", "loss_policy", "loss_learner"]


def write_curves(path: str | Path, curves: Sequence[Mapping]) -> None:
    import csv

    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_FIELDS)
        w.writeheader()
        for row in curves:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def read_curves(path: str | Path) -> list[dict]:
    import csv

    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["episode"] = int(r["episode"])
        for k in CURVE_FIELDS[2:]:
            r[k] = float(r[k])
    return rows


def save_checkpoint(trained: TrainedAgent, path: str | Path) -> None:
    arrays = {}
    groups = trained.agent.groups()
    names = {id(p): n for n, p in trained.agent.named_parameters()}
    for group, params in groups.items():
        for p in params:
            arrays[f"{group}/{names[id(p)]}"] = p.detach().numpy()
    header = {
        "config": asdict(trained.config),
        "stats": trained.stats.to_dict(),
        "slot_count": trained.slot_count,
    }
    if trained.optimizers is not None:
        for opt_name, opt in (("policy", trained.optimizers.policy), ("learner", trained.optimizers.learner)):
            state = opt.state_dict()
            header[f"optim_{opt_name}"] = {
                "param_groups": state["param_groups"],
                "steps": {str(k): float(v["step"]) for k, v in state["state"].items()},
            }
            for k, v in state["state"].items():
                arrays[f"optim/{opt_name}/{k}/exp_avg"] = v["exp_avg"].numpy()
                arrays[f"optim/{opt_name}/{k}/exp_avg_sq"] = v["exp_avg_sq"].numpy()
    write_arrays(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, header, arrays)


def load_checkpoint(path: str | Path) -> TrainedAgent:
    _, header, arrays = read_arrays(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    config = LearnerConfig.from_dict(header["config"])
    stats = NormStats(**header["stats"])
    agent = MultiTaskAgent(config, stats.feature_dim, header["slot_count"])
    params = {k.split("/", 1)[1]: v for k, v in arrays.items() if not k.startswith("optim/")}
    load_state_arrays(agent, params)
    optimizers = Optimizers(agent, config.lr)
    for opt_name, opt in (("policy", optimizers.policy), ("learner", optimizers.learner)):
        key = f"optim_{opt_name}"
        if key not in header:
            continue
        state = {"param_groups": header[key]["param_groups"], "state": {}}
        for k, stp in header[key]["steps"].items():
            state["state"][int(k)] = {
                "step": torch.tensor(stp, dtype=torch.float32),
                "exp_avg": torch.from_numpy(arrays[f"optim/{opt_name}/{k}/exp_avg"]),
                "exp_avg_sq": torch.from_numpy(arrays[f"optim/{opt_name}/{k}/exp_avg_sq"]),
            }
        opt.load_state_dict(state)
    return TrainedAgent(agent, stats, config, optimizers=optimizers)


def config_json(config: LearnerConfig) -> str:
    return json.dumps(asdict(config), sort_keys=True)
