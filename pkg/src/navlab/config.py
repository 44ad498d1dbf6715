"""One experiment, one JSON config, one output directory.

Every section maps onto the dataclass that consumes it; unknown keys are
rejected by name so a typo fails before any job starts.  Overrides arrive as
dotted ``key=value`` strings from the command line.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .agent import AgentConfig
from .rl import PPOConfig


@dataclass
class WorldGenConfig:
    count: int = 8
    width: int = 40
    height: int = 40
    start_seed: int = 300

    def __post_init__(self) -> None:
        if self.count < 1:
            raise ValueError("worlds.count must be positive")


@dataclass
class EpisodeGenConfig:
    split_plans: dict[str, list[str]] = field(default_factory=dict)
    per_split: dict[str, int] = field(default_factory=dict)
    min_geodesic: float = 1.5
    max_geodesic: float = 8.0
    face_goal_jitter: float | None = None

    def __post_init__(self) -> None:
        if self.min_geodesic <= 0 or self.max_geodesic <= self.min_geodesic:
            raise ValueError("episode geodesic band must be a positive range")
        if self.face_goal_jitter is not None and not (
                0.0 <= self.face_goal_jitter <= math.pi):
            raise ValueError("face_goal_jitter must be in [0, pi]")
        missing = set(self.split_plans) - set(self.per_split)
        if missing:
            raise ValueError(f"per_split missing counts for {sorted(missing)}")


@dataclass
class ProbeRunConfig:
    pairs_per_plan: int = 60
    image_size: int = 32
    min_geodesic: float = 1.0
    heading_jitter: float = math.pi / 3.0
    epochs: int = 20
    batch_size: int = 64
    lr: float = 3e-4
    tau: float = 0.25
    mlp_hidden: int = 1024
    target_params: int = 300_000
    train_encoder: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.tau < 1.0:
            raise ValueError("probe.tau must lie strictly between 0 and 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("probe epochs and batch size must be positive")


_SECTIONS = {
    "worlds": WorldGenConfig,
    "episodes": EpisodeGenConfig,
    "agent": AgentConfig,
    "ppo": PPOConfig,
    "probe": ProbeRunConfig,
}


def _section_from_json(cls, obj: dict):
    if hasattr(cls, "from_json"):
        return cls.from_json(obj)
    known = set(cls.__dataclass_fields__)
    unknown = set(obj) - known
    if unknown:
        raise ValueError(
            f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**obj)


@dataclass
class ExperimentConfig:
    seed: int = 0
    sliding: bool = True
    worlds: WorldGenConfig = field(default_factory=WorldGenConfig)
    episodes: EpisodeGenConfig = field(default_factory=EpisodeGenConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    probe: ProbeRunConfig = field(default_factory=ProbeRunConfig)

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "sliding": self.sliding,
            "worlds": asdict(self.worlds),
            "episodes": asdict(self.episodes),
            "agent": self.agent.to_json(),
            "ppo": self.ppo.to_json(),
            "probe": asdict(self.probe),
        }

    @staticmethod
    def from_json(obj: dict) -> "ExperimentConfig":
        cfg = ExperimentConfig()
        for key, value in obj.items():
            if key in _SECTIONS:
                setattr(cfg, key, _section_from_json(_SECTIONS[key], value))
            elif key == "seed":
                cfg.seed = int(value)
            elif key == "sliding":
                if not isinstance(value, bool):
                    raise ValueError("sliding must be true or false")
                cfg.sliding = value
            else:
                raise ValueError(f"unknown config key {key!r}")
        return cfg


def parse_override(text: str) -> tuple[list[str], object]:
    """``a.b.c=value`` -> (path, parsed value); values parse as JSON first."""
    if "=" not in text:
        raise ValueError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    path = [p for p in key.strip().split(".") if p]
    if not path:
        raise ValueError(f"override {text!r} has an empty key")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path, value


def apply_overrides(obj: dict, overrides: list[str]) -> dict:
    """Pure: returns a new config dict with each dotted override applied."""
    out = copy.deepcopy(obj)
    for text in overrides:
        path, value = parse_override(text)
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ValueError(
                    f"override {text!r} descends into non-object {part!r}")
        node[path[-1]] = value
    return out


def load_config(path: str | Path,
                overrides: list[str] | None = None) -> ExperimentConfig:
    try:
        obj = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ValueError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ValueError(f"config file {path} is not valid JSON: {e}")
    if not isinstance(obj, dict):
        raise ValueError("config root must be a JSON object")
    if overrides:
        obj = apply_overrides(obj, overrides)
    return ExperimentConfig.from_json(obj)
