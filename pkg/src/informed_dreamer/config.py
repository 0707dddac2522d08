"""Run configuration and the flat ``train.* / env.* / model.*`` JSON format."""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from informed_dreamer.diffcore import ContractError
from informed_dreamer.worldmodel import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    env: str = "tmaze-4"
    steps: int = 100_000  # S
    prefill: int = 1024  # F
    train_ratio: float = 0.5  # R, gradient steps per env step
    window: int = 16  # W
    horizon: int = 8  # K
    batch: int = 16  # N
    capacity: int = 100_000  # B, in windows
    gamma: float | None = None  # None: the environment's discount
    lam: float = 0.95
    seed: int = 0
    informed: bool = True
    stride: int = 1  # store a window every `stride` env steps
    wm_lr: float = 3e-4
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    clip: float = 100.0
    entropy: float = 3e-4
    cont_weighting: bool = True
    log_every: int = 1000
    eval_every: int = 0
    eval_episodes: int = 20
    stop_success: float | None = None
    ckpt_every: int = 0
    record_wall_clock: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        problems = []
        if self.prefill > self.capacity:
            problems.append("prefill (F) must not exceed capacity (B)")
        if self.window < 2:
            problems.append("window (W) must be >= 2")
        if self.horizon < 1:
            problems.append("horizon (K) must be >= 1")
        if self.batch < 1:
            problems.append("batch (N) must be >= 1")
        if self.gamma is not None and not 0.0 <= self.gamma < 1.0:
            problems.append("gamma must lie in [0, 1)")
        if not 0.0 <= self.lam <= 1.0:
            problems.append("lam must lie in [0, 1]")
        if self.stride < 1:
            problems.append("stride must be >= 1")
        if problems:
            raise ContractError("; ".join(problems))

    def to_flat(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            if f.name == "model":
                continue
            key = "env.name" if f.name == "env" else f"train.{f.name}"
            out[key] = getattr(self, f.name)
        for k, v in dataclasses.asdict(self.model).items():
            out[f"model.{k}"] = v
        return out

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)} - {"env", "model"}
_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}


def _line_of(text: str, key: str) -> int:
    m = re.search(r'"' + re.escape(key) + r'"\s*:', text)
    return text.count("\n", 0, m.start()) + 1 if m else 0


def parse_config(text: str, source: str = "<config>") -> TrainConfig:
    """Parse a flat JSON config; unknown keys and bad values are hard errors."""
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{source}:{err.lineno}:{err.colno}: {err.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}:1: top level must be a JSON object")
    train, model = {}, {}
    for key, value in raw.items():
        where = f"{source}:{_line_of(text, key)}"
        ns, _, name = key.partition(".")
        if ns == "env" and name == "name":
            train["env"] = value
        elif ns == "train" and name in _TRAIN_KEYS:
            train[name] = value
        elif ns == "model" and name in _MODEL_KEYS:
            model[name] = value
        else:
            raise ConfigError(f"{where}: unknown config key {key!r}")
        expected = (
            ModelConfig.__dataclass_fields__[name].type
            if ns == "model"
            else TrainConfig.__dataclass_fields__["env" if ns == "env" else name].type
        )
        if not _type_ok(value, expected):
            raise ConfigError(f"{where}: {key!r} has bad value {value!r} (expected {expected})")
    try:
        return TrainConfig(**train, model=ModelConfig(**model))
    except (ContractError, TypeError) as err:
        raise ConfigError(f"{source}: {err}") from None


def _type_ok(value, annotation: str) -> bool:
    kinds = {
        "int": lambda v: isinstance(v, int) and not isinstance(v, bool),
        "float": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
        "bool": lambda v: isinstance(v, bool),
        "str": lambda v: isinstance(v, str),
        "None": lambda v: v is None,
    }
    return any(kinds[t.strip()](value) for t in str(annotation).split("|"))


def load_config(path: str | Path) -> TrainConfig:
    path = Path(path)
    return parse_config(path.read_text(), str(path))


def dump_config(cfg: TrainConfig) -> str:
    return json.dumps(cfg.to_flat(), indent=2)
