"""Flat ``key=value`` config files and the typed run configuration."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        out[key] = value
    return out


def load_kv(path: str | Path) -> dict[str, str]:
    return parse_kv(Path(path).read_text())


def dump_kv(data: dict, path: str | Path) -> None:
    Path(path).write_text("".join(f"{k}={v}\n" for k, v in data.items()))


@dataclass
class RunConfig:
    """Everything a training run needs. ``size`` and ``seed`` must be given explicitly."""

    size: str = "micro-XL"
    seed: int = 0
    batch: int = 64
    lr_I: float = 1e-4
    lr_II: float = 1e-4
    lr_III: float = 2e-5
    steps_I: int = 20_000
    steps_II: int = 20_000
    steps_III: int = 2_000
    checkpoint_every: int = 1_000
    drop_text: float = 0.05
    drop_image: float = 0.05
    drop_both: float = 0.05
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.95
    grad_clip: float = 1.0
    timestep_sampling: str = "uniform"
    # non-ladder model dims, used only when size == "custom"
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4

    REQUIRED = ("size", "seed")

    @classmethod
    def from_kv(cls, data: dict[str, str]) -> "RunConfig":
        for key in cls.REQUIRED:
            if key not in data:
                raise ConfigError(f"missing required config key {key!r}")
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in data.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            kind = type(getattr(cls, key)) if hasattr(cls, key) else str
            try:
                kwargs[key] = kind(value)
            except ValueError:
                raise ConfigError(f"config key {key!r}: cannot parse {value!r} as {kind.__name__}") from None
        cfg = cls(**kwargs)
        if cfg.timestep_sampling not in ("uniform", "logit_normal"):
            raise ConfigError(f"timestep_sampling must be uniform or logit_normal, got {cfg.timestep_sampling!r}")
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_kv(load_kv(path))

    def to_kv(self) -> dict[str, str]:
        return {k: str(v) for k, v in asdict(self).items()}
