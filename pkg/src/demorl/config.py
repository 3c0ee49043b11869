"""Run configuration with a flat dotted-key JSON representation."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, Optional

from .envsim import MazeConfig
from .errors import ConfigurationError
from .latentmodel import ModelConfig
from .learner import LearnerConfig
from .shaping import ShapingConfig


@dataclass
class DemoSection:
    path: Optional[str] = None  # read demos from here; generate in-process when unset
    count: int = 5
    seed: int = 1000
    noise: float = 0.05


@dataclass
class ModelSchedule:
    period: int = 1000
    max_updates: int = 2000
    min_updates: int = 500
    window: int = 50
    average: int = 20
    tol: float = 0.01


@dataclass
class RLSection:
    batch_size: int = 128
    p_d: float = 0.15
    replay_capacity: int = 100_000


@dataclass
class Schedule:
    max_steps: int = 20_000
    init_random_steps: int = 1000
    learn_start: int = 1000
    eval_period: int = 2000
    eval_episodes: int = 10
    log_period: int = 500
    checkpoint_period: int = 10_000
    stop_success: Optional[float] = None  # end the run once an evaluation reaches this success rate


@dataclass
class Flags:
    importance_sampling: bool = True
    value_clipping: bool = True
    shaping: bool = True
    augmentation: bool = True
    printed_q_min: bool = False


@dataclass
class BenchSection:
    side: int = 48
    episodes: int = 300
    episode_length: int = 20
    updates: int = 6000
    batch_size: int = 64
    latent_dim: int = 2
    augment: bool = False
    agent_radius_px: float = 2.5


def desk_env() -> MazeConfig:
    return MazeConfig(side=32, start_jitter=0.1, agent_radius_px=2.5)


def desk_model() -> ModelConfig:
    return ModelConfig(side=32, crop_pad=2, latent_dim=8, dec_upsample=2, decoder="mlp", recon_std=0.1)


@dataclass
class RunConfig:
    seed: int = 0
    env: MazeConfig = field(default_factory=desk_env)
    demos: DemoSection = field(default_factory=DemoSection)
    model: ModelConfig = field(default_factory=desk_model)
    model_schedule: ModelSchedule = field(default_factory=ModelSchedule)
    shaping: ShapingConfig = field(default_factory=ShapingConfig)
    learner: LearnerConfig = field(default_factory=LearnerConfig)
    rl: RLSection = field(default_factory=RLSection)
    schedule: Schedule = field(default_factory=Schedule)
    flags: Flags = field(default_factory=Flags)
    bench: BenchSection = field(default_factory=BenchSection)

    def validate(self) -> None:
        self.env.validate()
        if not 0.0 < self.learner.gamma < 1.0:
            raise ConfigurationError("gamma must lie in (0, 1)")
        self.shaping.validate(self.env.r_live)
        if not 0.0 <= self.rl.p_d <= 1.0:
            raise ConfigurationError("p_d must lie in [0, 1]")
        if self.rl.batch_size < 1:
            raise ConfigurationError("batch size must be at least 1")
        s = self.schedule
        if s.max_steps < 1:
            raise ConfigurationError("schedule.max_steps must be at least 1")
        if s.stop_success is not None and not 0.0 <= s.stop_success <= 1.0:
            raise ConfigurationError("schedule.stop_success must lie in [0, 1]")
        if s.eval_period % s.log_period or s.checkpoint_period % s.log_period:
            raise ConfigurationError("eval and checkpoint periods must be multiples of the log period")
        if self.model.side != self.env.side:
            raise ConfigurationError("model.side must equal env.side")
        if self.flags.importance_sampling and self.rl.p_d > 0 and self.demos.count == 0 and not self.demos.path:
            raise ConfigurationError("importance sampling needs demonstrations")

    # -- flat dotted keys -------------------------------------------------
    def to_flat(self) -> Dict[str, Any]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if is_dataclass(value):
                for k, v in asdict(value).items():
                    out[f"{f.name}.{k}"] = list(v) if isinstance(v, tuple) else v
            else:
                out[f.name] = value
        return out

    @classmethod
    def from_flat(cls, flat: Dict[str, Any]) -> "RunConfig":
        cfg = cls()
        cfg.update(flat)
        return cfg

    def update(self, flat: Dict[str, Any]) -> "RunConfig":
        sections = {}
        for key, value in flat.items():
            section, _, name = key.partition(".")
            if not name:
                if section not in {f.name for f in fields(self)} or is_dataclass(getattr(self, section)):
                    raise ConfigurationError(f"unknown config key {key!r}")
                setattr(self, section, value)
                continue
            target = getattr(self, section, None)
            if not is_dataclass(target) or name not in {f.name for f in fields(target)}:
                raise ConfigurationError(f"unknown config key {key!r}")
            sections.setdefault(section, {})[name] = value
        for section, values in sections.items():
            current = asdict(getattr(self, section))
            current.update(values)
            setattr(self, section, type(getattr(self, section))(**current))
        return self

    def save(self, path: os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_flat(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: os.PathLike) -> "RunConfig":
        try:
            flat = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        return cls.from_flat(flat)
