"""Run configuration loaded from JSON; unknown keys are rejected by name."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .caption import ToyCaptionConfig
from .denoise import DenoiseConfig

TASKS = ("denoise", "caption")
MODELS = ("baseline", "middleout")
VARIANTS = ("none", "output", "hidden", "dual")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    task: str = "denoise"
    model: str = "middleout"
    # None picks the task default: hidden (denoise) or dual (caption) for middle-out, none for the baseline
    self_attention: str | None = None
    oracle_input: bool = False
    seed: int = 0
    data_dir: str = "data"
    denoise: DenoiseConfig = field(default_factory=DenoiseConfig)
    caption: ToyCaptionConfig = field(default_factory=ToyCaptionConfig)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.model not in MODELS:
            raise ConfigError(f"model must be one of {MODELS}, got {self.model!r}")
        if self.self_attention is not None and self.self_attention not in VARIANTS:
            raise ConfigError(f"self_attention must be one of {VARIANTS}, got {self.self_attention!r}")
        if self.task == "denoise" and self.self_attention in ("output", "dual"):
            raise ConfigError("the de-noising task has no output embeddings: self_attention must be none or hidden")
        if self.oracle_input and (self.task != "caption" or self.model != "baseline"):
            raise ConfigError("oracle_input applies to the caption baseline only")
        self.denoise.seed = self.seed
        self.caption.seed = self.seed

    @property
    def variant(self) -> str:
        if self.self_attention is not None:
            return self.self_attention
        if self.model == "baseline":
            return "none"
        return "hidden" if self.task == "denoise" else "dual"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        top = {f.name for f in dataclasses.fields(cls)}
        for key in raw:
            if key not in top:
                raise ConfigError(f"unknown config key {key!r}")
        kwargs = {k: v for k, v in raw.items() if k not in ("denoise", "caption")}
        for key in ("seed", "oracle_input", "task", "model", "data_dir"):
            if key in kwargs:
                _check_type(key, kwargs[key], getattr(_TOP_DEFAULTS, key))
        kwargs["denoise"] = _section(DenoiseConfig, raw.get("denoise", {}), "denoise")
        kwargs["caption"] = _section(ToyCaptionConfig, raw.get("caption", {}), "caption")
        return cls(**kwargs)


_TOP_DEFAULTS = RunConfig()


def _section(kind, raw, prefix: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"config section {prefix!r} must be an object")
    defaults = kind()
    names = {f.name for f in dataclasses.fields(kind)}
    for key, value in raw.items():
        if key not in names:
            raise ConfigError(f"unknown config key {prefix + '.' + key!r}")
        _check_type(f"{prefix}.{key}", value, getattr(defaults, key))
    return kind(**raw)


def _check_type(key: str, value, default) -> None:
    expected = type(default)
    ok = isinstance(value, expected) and not (expected is not bool and isinstance(value, bool))
    if expected is float and isinstance(value, int) and not isinstance(value, bool):
        ok = True
    if not ok:
        raise ConfigError(f"config key {key!r} expects {expected.__name__}, got {value!r}")


def read_config_file(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return raw


def load_config(path) -> RunConfig:
    return RunConfig.from_dict(read_config_file(path))
