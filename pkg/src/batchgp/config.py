"""Run configuration: one flat ``section.key = value`` file for the whole pipeline.

    # comments start with '#'
    seed = 3
    train.batch_size = 100
    reward.q = 10, 0.1

Every key has a default, unknown keys are rejected, and list values are
comma separated. ``none`` clears an optional value.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field, fields
from pathlib import Path

from .rng import derive_seed


class ConfigError(ValueError):
    pass


@dataclass
class PathsSection:
    data: str = "data.csv"
    model: str = "model.bgp"
    policy: str = "policy.bgp"
    train_log: str = "train_log.csv"
    metrics: str = "metrics.csv"
    trajectory: str = "trajectory.csv"
    scaling: str = "bench_scaling.csv"
    learning: str = "bench_learning.csv"


@dataclass
class CollectSection:
    duration: float = 110.0
    excitation: str = "manual_profile"


@dataclass
class PlantSection:
    gain: float = 2.0
    damping: float = 1.5
    deadband: float = 0.1
    rate_limit: float = math.inf
    gravity: float = 0.5
    angle_min: float = -1.2
    angle_max: float = 0.9
    noise_std: tuple = (0.002, 0.01)
    dt: float = 0.05


@dataclass
class FitSection:
    max_steps: int = 500
    lr: float = 0.05
    max_points: int = 400
    noise_floor: float = 1e-4
    root_rank: str = "auto"  # "auto", "none" or an integer
    holdout: float = 0.2


@dataclass
class RewardSection:
    q: tuple = (10.0, 0.1)
    sigma_r: float = 1.0


@dataclass
class TrainSection:
    batch_size: int = 100
    horizon: int = 300
    learning_rate: float = 1e-2
    max_steps: int = 100
    hidden: tuple = (8, 8)
    init_scheme: str = "he"
    init_candidates: int = 8  # initial policies scored before training; the best one is trained
    goal_conditioned: bool = False
    init_state_mode: str = "fixed"
    goal_mode: str = "fixed"
    init_state: tuple = (-0.9, 0.0)
    goal: tuple = (0.0, 0.0)
    init_low: tuple | None = None
    init_high: tuple | None = None
    goal_low: tuple | None = None
    goal_high: tuple | None = None
    chunk_size: int | None = None
    memory_budget_mb: float | None = None
    workers: int = 1
    early_stop_tol: float | None = 1e-5


@dataclass
class EvalSection:
    goals: tuple | None = None  # none: the training goal, or four step references if goal-conditioned
    episode_length: int = 200
    n_episodes: int = 10
    initial_angle: float = -0.9
    init_spread: float = 0.05
    tolerance: float = 0.05


@dataclass
class BenchSection:
    axis: str = "horizon"
    values: tuple = (100, 300, 1000)
    repetitions: int = 3
    warmup: int = 1
    batch_size: int = 100
    horizon: int = 300
    hidden: tuple = (8, 8)
    modes: tuple = ("batch_100", "sequential_1")
    trials: int = 8
    budget_s: float = 60.0
    eval_batch: int = 100
    eval_horizon: int = 100
    chunk_size: int | None = None
    workers: int = 1


SECTIONS = {
    "paths": PathsSection,
    "collect": CollectSection,
    "plant": PlantSection,
    "fit": FitSection,
    "reward": RewardSection,
    "train": TrainSection,
    "eval": EvalSection,
    "bench": BenchSection,
}


@dataclass
class RunConfig:
    seed: int = 0
    paths: PathsSection = field(default_factory=PathsSection)
    collect: CollectSection = field(default_factory=CollectSection)
    plant: PlantSection = field(default_factory=PlantSection)
    fit: FitSection = field(default_factory=FitSection)
    reward: RewardSection = field(default_factory=RewardSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    bench: BenchSection = field(default_factory=BenchSection)

    def module_seed(self, label: str) -> int:
        """Seed for one pipeline stage, derived from the master seed."""
        return derive_seed(self.seed, label)

    def set(self, key: str, text: str) -> None:
        if key == "seed":
            self.seed = _parse_scalar(key, text, int)
            return
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name:
            raise ConfigError(f"unknown key {key!r}")
        obj = getattr(self, section)
        spec = {f.name: f for f in fields(obj)}
        if name not in spec:
            raise ConfigError(f"unknown key {key!r}")
        setattr(obj, name, _coerce(key, text, getattr(SECTIONS[section](), name), spec[name].type))

    def items(self):
        """(key, value) pairs in file order, for writing a config back out."""
        yield "seed", self.seed
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in fields(obj):
                yield f"{section}.{f.name}", getattr(obj, f.name)


def _parse_scalar(key, text, kind):
    t = text.strip()
    try:
        if kind is bool:
            low = t.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(t)
        if kind is int:
            return int(t)
        if kind is float:
            return float(t)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text.strip()!r} as {kind.__name__}") from None
    return t


def _coerce(key, text, default, annotation: str):
    t = text.strip()
    optional = "None" in str(annotation)
    if t.lower() == "none":
        if optional:
            return None
        if isinstance(default, str):
            return t.lower()
        raise ConfigError(f"{key} cannot be none")
    if isinstance(default, tuple) or "tuple" in str(annotation):
        parts = [x.strip() for x in t.split(",") if x.strip()]
        if not parts:
            raise ConfigError(f"{key}: empty list")
        sample = default[0] if default else 0.0
        kind = type(sample) if isinstance(sample, (int, float, str)) else float
        if key == "bench.values" and any("x" in x for x in parts):
            kind = str  # hidden layouts such as 8x8, for the policy_layers axis
        return tuple(_parse_scalar(key, x, kind) for x in parts)
    if isinstance(default, bool):
        return _parse_scalar(key, t, bool)
    if "int" in str(annotation) and not isinstance(default, float):
        return _parse_scalar(key, t, int)
    if "float" in str(annotation):
        return _parse_scalar(key, t, float)
    return t


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        try:
            cfg.set(key.strip(), value)
        except ConfigError as err:
            raise ConfigError(f"{source}:{lineno}: {err}") from None
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), str(path))


def format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ", ".join(format_value(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in cfg.items())


def replace_section(cfg: RunConfig, section: str, **changes) -> RunConfig:
    out = dataclasses.replace(cfg)
    setattr(out, section, dataclasses.replace(getattr(cfg, section), **changes))
    return out
