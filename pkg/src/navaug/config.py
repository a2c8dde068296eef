"""Run configuration: a JSON document with one section per pipeline stage."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

STAGES = ("generate", "graphs", "sample", "instructions", "emit", "train", "rollout", "evaluate", "report")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GenerateConfig:
    n_envs: int = 5
    n_rooms: int = 4
    room_size: float = 6.0
    pano_density: float = 0.35
    cell_size: float = 0.25
    door_width: float = 1.0
    extra_door_prob: float = 0.3
    feature_dim: int = 640
    splits: tuple = ("train",)


@dataclass(frozen=True)
class GraphConfig:
    sigma: float = 0.1
    grid_start: float = 0.0
    grid_stop: float = 3.0
    grid_step: float = 0.1

    def grid(self) -> tuple[float, ...]:
        n = int(round((self.grid_stop - self.grid_start) / self.grid_step))
        return tuple(round(self.grid_start + k * self.grid_step, 10) for k in range(n + 1))


@dataclass(frozen=True)
class SampleStageConfig:
    waypoints: int = 3
    max_length_m: float = 40.0
    max_steps: int = 16
    per_env_cap: int = 40
    attempts_factor: int = 2
    pre_explore: bool = False


@dataclass(frozen=True)
class InstructionConfig:
    vocab_size: int = 4096
    token_noise: float = 0.1
    train_fraction: float = 0.7


@dataclass(frozen=True)
class EmitConfig:
    mask_rate: float = 0.15


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "dagger"
    embed_dim: int = 64
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.01
    optimizer: str = "adam"
    l2: float = 1e-4
    loss_weights: tuple = (1.0, 1.0, 0.2, 0.1)
    dagger_perturb: bool = False


@dataclass(frozen=True)
class EvalConfig:
    perturb_start: bool = False


_SECTIONS = {
    "generate": GenerateConfig,
    "graphs": GraphConfig,
    "sample": SampleStageConfig,
    "instructions": InstructionConfig,
    "emit": EmitConfig,
    "train": TrainConfig,
    "evaluate": EvalConfig,
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_root: str = "runs/default"
    stages: tuple = STAGES
    generate: GenerateConfig = field(default_factory=GenerateConfig)
    graphs: GraphConfig = field(default_factory=GraphConfig)
    sample: SampleStageConfig = field(default_factory=SampleStageConfig)
    instructions: InstructionConfig = field(default_factory=InstructionConfig)
    emit: EmitConfig = field(default_factory=EmitConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluate: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def validate(self) -> "RunConfig":
        bad = [s for s in self.stages if s not in STAGES]
        if bad:
            raise ConfigError(f"unknown stage(s) {bad}; known: {list(STAGES)}")
        if self.train.mode not in ("bc", "dagger"):
            raise ConfigError(f"train.mode must be 'bc' or 'dagger', got {self.train.mode!r}")
        if not 0 < self.instructions.train_fraction < 1:
            raise ConfigError("instructions.train_fraction must lie in (0, 1)")
        if self.generate.n_envs < 1:
            raise ConfigError("generate.n_envs must be >= 1")
        if self.graphs.grid_step <= 0 or self.graphs.grid_stop < self.graphs.grid_start:
            raise ConfigError("graphs grid must have a positive step and stop >= start")
        if len(self.train.loss_weights) != 4:
            raise ConfigError("train.loss_weights needs four entries")
        return self


def _coerce(name: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{name}: expected a list, got {value!r}")
        if default and isinstance(default[0], float):
            return tuple(_coerce(f"{name}[{k}]", v, 0.0) for k, v in enumerate(value))
        return tuple(_coerce(f"{name}[{k}]", v, "") for k, v in enumerate(value))
    raise ConfigError(f"{name}: unsupported field type")


def _build(cls, data, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{prefix or 'config'}: unknown key(s) {unknown}")
    defaults = cls()
    kw = {}
    for key, value in data.items():
        name = f"{prefix}.{key}" if prefix else key
        if key in _SECTIONS and cls is RunConfig:
            kw[key] = _build(_SECTIONS[key], value, name)
        else:
            kw[key] = _coerce(name, value, getattr(defaults, key))
    return cls(**kw)


def parse_config(text: str) -> RunConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from err
    return _build(RunConfig, data, "").validate()


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    return parse_config(text)
