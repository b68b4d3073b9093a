"""JSON experiment configuration with strict keys and line-anchored errors."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import List

from advest.ppo import ConfigError, TrainerConfig

TRAINER_FIELDS = {f.name: f for f in dataclasses.fields(TrainerConfig)}
# excluded from the hash so a resumed run may extend its budget
UNHASHED_FIELDS = {"total_env_steps"}


class ConfigFileError(ConfigError):
    """Config problem tied to a location in the source file."""


@dataclass
class ExperimentConfig:
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    env: str = "cartpole"
    sweep_T: List[int] = field(default_factory=lambda: [64, 128])
    sweep_epsilon: List[int] = field(default_factory=lambda: [32, 64])
    n_seeds: int = 3
    out_dir: str = "runs"
    checkpoint_every: int = 0

    def __post_init__(self):
        if not self.sweep_T or not self.sweep_epsilon:
            raise ConfigError("sweep grids must be non-empty")
        if self.n_seeds < 1:
            raise ConfigError("n_seeds must be >= 1")

    def config_hash(self) -> str:
        payload = {k: v for k, v in self.trainer.to_dict().items() if k not in UNHASHED_FIELDS}
        payload["env"] = self.env
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]

    def with_trainer(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, trainer=dataclasses.replace(self.trainer, **changes))

    def to_dict(self) -> dict:
        d = self.trainer.to_dict()
        d.update(env=self.env, sweep_T=list(self.sweep_T), sweep_epsilon=list(self.sweep_epsilon),
                 n_seeds=self.n_seeds, out_dir=self.out_dir, checkpoint_every=self.checkpoint_every)
        return d


EXPERIMENT_KEYS = {f.name for f in dataclasses.fields(ExperimentConfig)} - {"trainer"}

_TYPES = {
    "gamma": float, "lam": float, "clip_coef": float, "value_coef": float, "entropy_coef": float,
    "learning_rate": float, "sample_length": int, "partial_coef": int, "n_actors": int, "epochs": int,
    "minibatch_size": int, "total_env_steps": int, "seed": int, "normalize_advantages": bool,
    "value_clip": bool, "partial_gae": bool, "bootstrap_mode": str, "activation": str, "hidden_sizes": list,
    "env": str, "sweep_T": list, "sweep_epsilon": list, "n_seeds": int, "out_dir": str, "checkpoint_every": int,
}


def _key_line(text: str, key: str) -> int:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else 1


def _check_type(key, value):
    want = _TYPES[key]
    if want is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif want is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif want is list:
        ok = isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
    else:
        ok = isinstance(value, want)
    if not ok:
        raise ValueError(f"{key!r} must be of type {want.__name__}, got {value!r}")


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigFileError(f"{source}:{exc.lineno}:{exc.colno}: invalid JSON: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigFileError(f"{source}:1: top level must be a JSON object")
    for key, value in raw.items():
        if key not in _TYPES:
            raise ConfigFileError(f"{source}:{_key_line(text, key)}: unknown key {key!r}")
        try:
            _check_type(key, value)
        except ValueError as exc:
            raise ConfigFileError(f"{source}:{_key_line(text, key)}: {exc}") from None
    trainer_kwargs = {k: v for k, v in raw.items() if k in TRAINER_FIELDS}
    exp_kwargs = {k: v for k, v in raw.items() if k in EXPERIMENT_KEYS}
    try:
        trainer = TrainerConfig(**trainer_kwargs)
        return ExperimentConfig(trainer=trainer, **exp_kwargs)
    except (ConfigError, ValueError) as exc:
        anchor = _anchor_for(str(exc), raw)
        raise ConfigFileError(f"{source}:{_key_line(text, anchor) if anchor else 1}: {exc}") from None


_ANCHORS = (("epsilon", "partial_coef"), ("lambda", "lam"), ("bootstrapmode", "bootstrap_mode"),
            ("sweep grids", "sweep_T"))


def _anchor_for(message: str, raw: dict):
    lowered = message.lower()
    for needle, key in _ANCHORS:
        if needle in lowered and key in raw:
            return key
    for key in raw:
        if key in message:
            return key
    return None


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigFileError(f"{path}: cannot read config: {exc.strerror}") from None
    return parse_config(text, str(path))


def write_config(config: ExperimentConfig, path):
    Path(path).write_text(json.dumps(config.to_dict(), indent=2) + "\n", encoding="utf-8")
