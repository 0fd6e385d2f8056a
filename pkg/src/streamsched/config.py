"""Flat ``key = value`` run configuration covering generator, emulator, learner and evaluation."""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .emulator import EmulatorConfig
from .events import DomainError
from .learner import LearnerConfig
from .synthetic import SynthConfig

EMULATOR_PREFIX = "emulator_"


class ConfigError(ValueError):
    """Malformed or unknown configuration entry."""


@dataclass
class EvalConfig:
    trials: int = 5
    delta: float = 10.0
    ncis_mode: str = "stepwise"
    # evaluation rollout length; 0 means the learner horizon
    eval_horizon: int = 0


@dataclass
class RunConfig:
    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    emulator: EmulatorConfig = field(default_factory=EmulatorConfig)
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    @property
    def eval_horizon(self) -> int:
        return self.evaluation.eval_horizon or self.learner.horizon

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed, learner=replace(self.learner, seed=seed),
                       emulator=replace(self.emulator, seed=seed))


def _key_table() -> dict[str, tuple[str, str]]:
    """Config key -> (section, field name)."""
    table: dict[str, tuple[str, str]] = {"seed": ("", "seed")}
    for section, cls in (("synth", SynthConfig), ("learner", LearnerConfig), ("evaluation", EvalConfig)):
        for f in fields(cls):
            if f.name != "seed":
                table[f.name] = (section, f.name)
    for f in fields(EmulatorConfig):
        if f.name == "window":
            continue  # shared with the learner
        table[EMULATOR_PREFIX + f.name] = ("emulator", f.name)
    return table


def _coerce(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            kind = type(default[0]) if default else float
            return tuple(kind(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from exc
    return raw


def parse_config(text: str, base: RunConfig | None = None, source: str = "<config>") -> RunConfig:
    """Apply ``key = value`` lines to ``base``; ``#`` starts a comment."""
    cfg = base or RunConfig()
    sections = {name: {} for name in ("synth", "emulator", "learner", "evaluation")}
    seed, seed_given = cfg.seed, False
    table = _key_table()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key == "window":
            sections["learner"]["window"] = _coerce(raw, 0, key)
            sections["emulator"]["window"] = sections["learner"]["window"]
            continue
        if key not in table:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        section, name = table[key]
        if section == "":
            seed = _coerce(raw, 0, key)
            seed_given = True
            continue
        default = getattr(getattr(cfg, section), name)
        sections[section][name] = _coerce(raw, default, key)
    # the learner has no seed key of its own; the emulator follows unless set explicitly
    sections["learner"]["seed"] = seed
    if seed_given:
        sections["emulator"].setdefault("seed", seed)
    out = RunConfig(
        seed=seed,
        synth=replace(cfg.synth, **sections["synth"]),
        emulator=replace(cfg.emulator, **sections["emulator"]),
        learner=replace(cfg.learner, **sections["learner"]),
        evaluation=replace(cfg.evaluation, **sections["evaluation"]),
    )
    validate(out)
    return out


def load_config(path: str | Path | None, seed: int | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = parse_config(text, cfg, str(path))
    return cfg.with_seed(seed if seed is not None else cfg.seed)


def validate(cfg: RunConfig) -> None:
    try:
        cfg.synth.validate()
        cfg.learner.validate()
    except DomainError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.evaluation.trials < 1 or cfg.evaluation.delta <= 0:
        raise ConfigError("trials must be >= 1 and delta > 0")
    if cfg.evaluation.ncis_mode not in ("stepwise", "trajectory"):
        raise ConfigError(f"ncis_mode must be stepwise or trajectory, got {cfg.evaluation.ncis_mode!r}")
    if cfg.emulator.window != cfg.learner.window:
        raise ConfigError("emulator and learner windows differ")


def dump_config(cfg: RunConfig) -> str:
    """Inverse of :func:`parse_config`: every key with its current value."""
    lines = [f"seed = {cfg.seed}", f"window = {cfg.learner.window}"]
    for key, (section, name) in _key_table().items():
        if section == "" or name == "window":
            continue
        value = getattr(getattr(cfg, section), name)
        if isinstance(value, tuple):
            value = ", ".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
