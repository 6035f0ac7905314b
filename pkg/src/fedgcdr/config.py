"""Run configuration: TOML file, command-line overrides and a lossless dict echo.

Layout::

    seed = 0
    mode = "full"
    threads = 1
    out = "runs/demo"

    [pipeline]   # training, privacy and evaluation settings
    rounds = 150
    [synth]      # synthetic scenario
    n_users = 1000
    [attack]     # leakage sweep
    epsilons = [4, 8, 16, 32, 64]
    [data]       # ingestion
    min_interactions = 2

The root ``seed`` and ``mode`` apply everywhere; sections may not set them.
"""

from __future__ import annotations

import dataclasses
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .dataset import SynthConfig
from .federation import PipelineConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class AttackSettings:
    epsilons: tuple[float, ...] = (4.0, 8.0, 16.0, 32.0, 64.0)
    delta: float = 1e-5
    clip_norm: float = 1.0
    seeds: tuple[int, ...] = (0, 1, 2)
    step_size: float = 0.05
    iterations: int = 300
    restarts: int = 3
    init_std: float = 0.1
    n_users: int = 30
    n_items: int = 40
    degree: int = 3
    dim: int = 4
    n_layers: int = 2


@dataclass(frozen=True)
class DataSettings:
    min_interactions: int = 1
    strict: bool = True


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    mode: str = "full"
    threads: int = 1
    out: str = "out"
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    attack: AttackSettings = field(default_factory=AttackSettings)
    data: DataSettings = field(default_factory=DataSettings)

    def __post_init__(self):
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        # the root seed and mode are authoritative
        if self.pipeline.seed != self.seed or self.pipeline.mode != self.mode:
            object.__setattr__(self, "pipeline", dataclasses.replace(self.pipeline, seed=self.seed, mode=self.mode))
        if self.synth.seed != self.seed:
            object.__setattr__(self, "synth", dataclasses.replace(self.synth, seed=self.seed))

    def to_dict(self) -> dict[str, Any]:
        def section(obj, skip=("seed", "mode")):
            return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(obj).items() if k not in skip}

        return {
            "seed": self.seed,
            "mode": self.mode,
            "threads": self.threads,
            "out": self.out,
            "pipeline": section(self.pipeline),
            "synth": section(self.synth),
            "attack": section(self.attack),
            "data": section(self.data),
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "RunConfig":
        sections = {"pipeline": PipelineConfig, "synth": SynthConfig, "attack": AttackSettings, "data": DataSettings}
        top = {f.name: f for f in dataclasses.fields(cls) if f.name not in sections}
        unknown = sorted(set(payload) - set(top) - set(sections))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        kwargs: dict[str, Any] = {k: _coerce(k, v, _default(cls, k)) for k, v in payload.items() if k in top}
        for name, kind in sections.items():
            body = payload.get(name, {})
            if not isinstance(body, dict):
                raise ConfigError(f"[{name}] must be a table")
            allowed = {f.name for f in dataclasses.fields(kind)} - {"seed", "mode"}
            bad = sorted(set(body) - allowed)
            if bad:
                raise ConfigError(f"unknown keys in [{name}]: {bad}")
            values = {k: _coerce(f"{name}.{k}", v, _default(kind, k)) for k, v in body.items()}
            try:
                kwargs[name] = kind(**values)
            except ValueError as exc:
                raise ConfigError(f"[{name}]: {exc}") from None
        try:
            return cls(**kwargs)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def with_overrides(self, **flags) -> "RunConfig":
        """Apply command-line flags; ``None`` means not given."""
        given = {k: v for k, v in flags.items() if v is not None}
        if not given:
            return self
        payload = self.to_dict()
        payload.update(given)
        return RunConfig.from_dict(payload)


def _default(kind, name: str):
    f = next(f for f in dataclasses.fields(kind) if f.name == name)
    return f.default if f.default is not dataclasses.MISSING else f.default_factory()


def _coerce(key: str, value, default):
    """Check a TOML value against the default's type; lists become tuples."""
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key} must be a list")
        inner = default[0] if default else value[0] if value else None
        return tuple(_coerce(key, v, inner) for v in value) if inner is not None else tuple(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string")
        return value
    return value


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        payload = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return RunConfig.from_dict(payload)
