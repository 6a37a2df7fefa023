"""Run configuration: a flat ``key = value`` text file.

Example::

    # detection run on the synthetic corpus
    task = detection
    plan = SID-1
    seed = 7
    frontend.n_mels = 80
    model.conv_channels = 16,32
    model.conv_strides = 2x2,2x2
    train.lr = 0.001

Top-level keys are listed in ``TOP_LEVEL``; dotted keys address fields of
``FrontendConfig`` (``frontend.``), ``ModelConfig`` (``model.``) and
``TrainConfig`` (``train.``).  Any other key is an error.  The model task
comes from ``task`` and every training seed derives from ``seed``, so
``model.task`` and ``train.seed`` are not accepted.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .audio import FrontendConfig
from .model import DETECTION, SEVERITY, ModelConfig
from .training import TrainConfig

TOP_LEVEL = ("task", "plan", "seed", "word_mode", "manifest", "features", "out")
_SECTIONS = {"frontend": FrontendConfig, "model": ModelConfig, "train": TrainConfig}
_RESERVED = {"model.task", "train.seed"}


class ConfigFileError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


def allowed_keys() -> list[str]:
    keys = list(TOP_LEVEL)
    for section, cls in _SECTIONS.items():
        keys += [f"{section}.{f.name}" for f in dataclasses.fields(cls)]
    return [k for k in keys if k not in _RESERVED]


def _parse_value(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            if default and isinstance(default[0], tuple):
                return tuple(tuple(int(v) for v in p.split("x")) for p in parts)
            return tuple(int(p) for p in parts)
        return raw
    except ValueError as err:
        raise ConfigFileError(f"bad value {raw!r} for {key}", key) from err


@dataclass(frozen=True)
class RunConfig:
    task: str = DETECTION
    plan: str = "SD"
    seed: int = 0
    word_mode: str = "random"
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        model = self.model.to_dict()
        train = dataclasses.asdict(self.train)
        train.pop("seed")
        return {"task": self.task, "plan": self.plan, "seed": self.seed, "word_mode": self.word_mode,
                "frontend": dataclasses.asdict(self.frontend), "model": model, "train": train}

    def digest(self) -> str:
        """sha256 over everything that affects results (paths excluded)."""
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def train_config(self, *labels) -> TrainConfig:
        """The training config with a seed derived from ``seed`` and ``labels`` (e.g. fold id)."""
        from .training import derive_seed
        return dataclasses.replace(self.train, seed=derive_seed(self.seed, "train", *labels))

    def with_overrides(self, values: dict[str, str]) -> "RunConfig":
        return _build(values, self)


def _build(values: dict[str, str], base: RunConfig) -> RunConfig:
    known = set(allowed_keys())
    top: dict = {}
    sections: dict[str, dict] = {s: {} for s in _SECTIONS}
    paths = dict(base.paths)
    for key, raw in values.items():
        if key not in known:
            raise ConfigFileError(f"unknown config key: {key}", key)
        if "." in key:
            section, name = key.split(".", 1)
            default = getattr(getattr(base, section), name)
            sections[section][name] = _parse_value(key, raw, default)
        elif key in ("manifest", "features", "out"):
            paths[key] = raw
        elif key == "seed":
            top[key] = _parse_value(key, raw, 0)
        else:
            top[key] = raw
    task = top.get("task", base.task)
    if task not in (DETECTION, SEVERITY):
        raise ConfigFileError(f"task must be {DETECTION} or {SEVERITY}, got {task!r}", "task")
    try:
        frontend = dataclasses.replace(base.frontend, **sections["frontend"])
        model = dataclasses.replace(base.model, task=task, **sections["model"])
        train = dataclasses.replace(base.train, **sections["train"])
    except (ValueError, TypeError) as err:
        raise ConfigFileError(f"invalid configuration: {err}") from err
    if model.n_mels != frontend.n_mels:
        raise ConfigFileError("model.n_mels must equal frontend.n_mels", "model.n_mels")
    return RunConfig(task=task, plan=top.get("plan", base.plan), seed=top.get("seed", base.seed),
                     word_mode=top.get("word_mode", base.word_mode), frontend=frontend, model=model,
                     train=train, paths=paths)


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigFileError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigFileError(f"line {lineno}: duplicate key {key}", key)
        values[key] = raw
    return _build(values, base or RunConfig())


def load_config(path) -> RunConfig:
    return parse_config_text(Path(path).read_text())


def format_config(config: RunConfig) -> str:
    """Inverse of ``parse_config_text`` (paths included)."""
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, (tuple, list)):
            return ",".join("x".join(map(str, x)) if isinstance(x, (tuple, list)) else str(x) for x in v)
        return str(v)

    lines = [f"task = {config.task}", f"plan = {config.plan}", f"seed = {config.seed}",
             f"word_mode = {config.word_mode}"]
    lines += [f"{k} = {v}" for k, v in sorted(config.paths.items())]
    for section in _SECTIONS:
        obj = getattr(config, section)
        for f in dataclasses.fields(obj):
            key = f"{section}.{f.name}"
            if key not in _RESERVED:
                lines.append(f"{key} = {fmt(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"
