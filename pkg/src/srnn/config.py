"""Flat ``key = value`` run configuration with named presets."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .generative import EMISSIONS, MODES, ModelDims


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Everything a run needs.  Defaults follow the full-size music model."""

    preset: str = ""                  # named bundle applied before explicit keys
    dataset: str = ""                 # piano-roll JSON path
    out_dir: str = "runs/default"
    emission: str = "bernoulli"       # bernoulli | gaussian
    z_dim: int = 100
    d_dim: int = 300
    a_dim: int = 300
    prior_hidden: tuple = (500,)
    emission_hidden: tuple = (500,)
    q_hidden: tuple = (500,)
    mode: str = "smooth"              # smooth | filt
    resq: bool = True
    resq_samples: int = 1
    beta_start: float = 0.2
    beta_increment: float = 0.0003    # per update
    learning_rate: float = 0.001
    batch_size: int = 64
    epochs: int = 100
    max_updates: int = 0              # 0 = no cap
    max_minutes: float = 0.0          # wall-clock cap; 0 = none (a cap breaks byte reproducibility)
    bptt_chunk: int = 0               # 0 = whole sequences
    seed: int = 0
    precision: str = "float64"
    grad_clip: float = 0.0            # global-norm clip; 0 = off
    logvar_min: float = -8.0
    logvar_max: float = 8.0
    valid_every: int = 1              # epochs between validation passes
    eval_batch_size: int = 64
    checked: bool = False             # raise on the first non-finite op

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.preset and self.preset not in PRESETS:
            raise ConfigError(f"preset: unknown preset {self.preset!r} (have {sorted(PRESETS)})")
        if self.emission not in EMISSIONS:
            raise ConfigError(f"emission: must be one of {EMISSIONS}, got {self.emission!r}")
        if self.mode not in MODES:
            raise ConfigError(f"mode: must be one of {MODES}, got {self.mode!r}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision: must be float32 or float64, got {self.precision!r}")
        for key in ("z_dim", "d_dim", "a_dim", "batch_size", "resq_samples", "valid_every",
                    "eval_batch_size"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key}: must be >= 1, got {getattr(self, key)}")
        for key in ("epochs", "max_updates", "bptt_chunk"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key}: must be >= 0, got {getattr(self, key)}")
        if not 0.0 <= self.beta_start <= 1.0:
            raise ConfigError(f"beta_start: must lie in [0, 1], got {self.beta_start}")
        if self.beta_increment < 0 or self.learning_rate < 0 or self.grad_clip < 0:
            raise ConfigError("beta_increment, learning_rate and grad_clip must be non-negative")
        if self.logvar_min >= self.logvar_max:
            raise ConfigError("logvar_min must be below logvar_max")

    def model_dims(self, x_dim: int) -> ModelDims:
        return ModelDims(x_dim=x_dim, z_dim=self.z_dim, d_dim=self.d_dim, a_dim=self.a_dim,
                         prior_hidden=self.prior_hidden, emission_hidden=self.emission_hidden,
                         q_hidden=self.q_hidden, emission=self.emission, mode=self.mode,
                         resq=self.resq, resq_samples=self.resq_samples,
                         logvar_bounds=(self.logvar_min, self.logvar_max))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def echo(self) -> str:
        lines = [f"{f.name} = {_format(getattr(self, f.name))}" for f in fields(self)]
        return "\n".join(lines) + "\n"

    def replace(self, **kw) -> "RunConfig":
        return dataclasses.replace(self, **kw)


PRESETS = {
    # 300 GRU units, 100 stochastic units, one 500-unit layer per net
    "jsb-full": dict(z_dim=100, d_dim=300, a_dim=300, prior_hidden=(500,), emission_hidden=(500,),
                     q_hidden=(500,), beta_increment=0.0003),
    # scaled down to fit a CPU budget
    "jsb-desk": dict(z_dim=30, d_dim=100, a_dim=100, prior_hidden=(100,), emission_hidden=(100,),
                     q_hidden=(100,), beta_increment=0.0003, learning_rate=0.001, batch_size=64),
    "timit": dict(emission="gaussian", z_dim=256, d_dim=1024, a_dim=1024, prior_hidden=(512, 512),
                  emission_hidden=(512, 512), q_hidden=(512, 512), beta_increment=0.0003,
                  learning_rate=0.001, batch_size=64, bptt_chunk=40),
    "blizzard": dict(emission="gaussian", z_dim=256, d_dim=2048, a_dim=2048,
                     prior_hidden=(1024, 1024), emission_hidden=(1024, 1024),
                     q_hidden=(1024, 1024), beta_increment=0.0001, learning_rate=0.0003,
                     batch_size=128, bptt_chunk=40),
}

_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _coerce(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "tuple":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None


def parse_pairs(pairs) -> dict:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"expected key=value, got {item!r}")
        key, value = item.split("=", 1)
        key = key.strip()
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _coerce(key, value)
    return out


def parse_text(text: str) -> dict:
    pairs = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            pairs.append(line)
    return parse_pairs(pairs)


def build_config(file_values: dict | None = None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the preset, then file values, then CLI overrides."""
    merged = dict(file_values or {})
    merged.update(overrides or {})
    values = {}
    preset = merged.get("preset", "")
    if preset:
        if preset not in PRESETS:
            raise ConfigError(f"preset: unknown preset {preset!r} (have {sorted(PRESETS)})")
        values.update(PRESETS[preset])
    values.update(merged)
    return RunConfig(**values)


def load_config(path=None, overrides=None) -> RunConfig:
    file_values = parse_text(Path(path).read_text()) if path else {}
    return build_config(file_values, parse_pairs(overrides or []))
