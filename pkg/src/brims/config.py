"""Model configuration: validation, defaults and JSON round-trips."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

VARIANTS = ("LSTM", "LSTM_H", "LSTM_HB", "LSTM_HA", "LSTM_HAB", "RIMS", "HIER_RIMS", "MLD_RIMS", "BRIMS")
LSTM_FAMILY = ("LSTM", "LSTM_H", "LSTM_HB", "LSTM_HA", "LSTM_HAB")
ATTENTION_VARIANTS = ("LSTM_HA", "LSTM_HAB", "RIMS", "HIER_RIMS", "MLD_RIMS", "BRIMS")
TOP_DOWN_VARIANTS = ("LSTM_HAB", "BRIMS")


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass
class BrimsConfig:
    variant: str = "BRIMS"
    n_modules: list[int] = field(default_factory=lambda: [6, 3])
    n_active: list[int] = field(default_factory=lambda: [4, 2])
    d_module: list[int] = field(default_factory=lambda: [50, 100])
    d_att: int = 64
    d_v: int = 64
    cell: str | None = None
    input_dim: int = 1
    embed_dim: int = 300
    output_dim: int = 10
    head: str = "classification"
    head_hidden: int = 128
    dropout: float = 0.5
    num_heads: int = 1
    per_module_keys: bool = False
    per_channel_encoder: bool = False
    comm_activation: str = "tanh"
    dtype: str = "float64"

    def __post_init__(self):
        self.validate()

    @property
    def layers(self) -> int:
        return len(self.n_modules)

    @property
    def cell_kind(self) -> str:
        if self.cell is not None:
            return self.cell
        return "lstm" if self.variant in LSTM_FAMILY else "gru"

    def layer_width(self, l: int) -> int:
        return self.n_modules[l] * self.d_module[l]

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError("model.variant", f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        for name in ("n_modules", "n_active", "d_module"):
            val = getattr(self, name)
            if not isinstance(val, (list, tuple)) or not val:
                raise ConfigError(f"model.{name}", "must be a non-empty list")
            for i, v in enumerate(val):
                if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                    raise ConfigError(f"model.{name}[{i}]", f"must be a positive integer, got {v!r}")
            setattr(self, name, list(val))
        L = len(self.n_modules)
        for name in ("n_active", "d_module"):
            if len(getattr(self, name)) != L:
                raise ConfigError(f"model.{name}", f"length {len(getattr(self, name))} differs from n_modules length {L}")
        for i, (m, n) in enumerate(zip(self.n_active, self.n_modules)):
            if m > n:
                raise ConfigError(f"model.n_active[{i}]", f"{m} active modules exceed {n} modules")
        for name in ("d_att", "d_v", "input_dim", "embed_dim", "output_dim", "head_hidden", "num_heads"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                raise ConfigError(f"model.{name}", f"must be a positive integer, got {v!r}")
        if self.cell is not None and self.cell not in ("gru", "lstm"):
            raise ConfigError("model.cell", f"expected 'gru' or 'lstm', got {self.cell!r}")
        if self.head not in ("classification", "regression"):
            raise ConfigError("model.head", f"expected 'classification' or 'regression', got {self.head!r}")
        if not isinstance(self.dropout, (int, float)) or not 0.0 <= self.dropout < 1.0:
            raise ConfigError("model.dropout", f"must lie in [0, 1), got {self.dropout!r}")
        if self.comm_activation not in ("tanh", "identity"):
            raise ConfigError("model.comm_activation", f"expected 'tanh' or 'identity', got {self.comm_activation!r}")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("model.dtype", f"expected 'float64' or 'float32', got {self.dtype!r}")
        if self.per_channel_encoder and self.embed_dim % self.input_dim:
            raise ConfigError("model.embed_dim", f"must be divisible by input_dim={self.input_dim} (one encoder per channel)")

        v = self.variant
        if v in LSTM_FAMILY:
            if self.cell == "gru":
                raise ConfigError("model.cell", f"variant {v} is LSTM based; cell must be 'lstm'")
            for i, (n, m) in enumerate(zip(self.n_modules, self.n_active)):
                if n != 1 or m != 1:
                    raise ConfigError(f"model.n_modules[{i}]", f"variant {v} uses one module per layer (n=m=1)")
        if v in ("LSTM", "RIMS") and L != 1:
            raise ConfigError("model.n_modules", f"variant {v} is single-layer, got {L} layers")
        if v in ("LSTM_H", "LSTM_HB", "LSTM_HA", "LSTM_HAB", "HIER_RIMS", "MLD_RIMS") and L < 2:
            raise ConfigError("model.n_modules", f"variant {v} needs at least 2 layers")
        if v == "MLD_RIMS":
            for i in range(1, L):
                if self.n_modules[i] != self.n_modules[0] or self.n_active[i] != self.n_active[0]:
                    raise ConfigError(f"model.n_modules[{i}]", "MLD_RIMS copies activation sets, so every layer needs the same n and m")
        if v in ATTENTION_VARIANTS:
            if self.d_att % self.num_heads or self.d_v % self.num_heads:
                raise ConfigError("model.num_heads", "d_att and d_v must be divisible by num_heads")
            for i, d in enumerate(self.d_module):
                if self.n_modules[i] > 1 and d % self.num_heads:
                    raise ConfigError(f"model.d_module[{i}]", "must be divisible by num_heads for communication")
        if self.per_module_keys and v not in ATTENTION_VARIANTS:
            raise ConfigError("model.per_module_keys", f"only meaningful for attention variants, not {v}")

    @property
    def has_top_down(self) -> bool:
        return self.variant in TOP_DOWN_VARIANTS or self.variant == "LSTM_HB"

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any], path: str = "model") -> "BrimsConfig":
        return _from_dict(cls, d, path)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "BrimsConfig":
        return cls.from_dict(json.loads(text))

    def replace(self, **changes) -> "BrimsConfig":
        return dataclasses.replace(self, **changes)


def _from_dict(cls, d, path: str):
    if not isinstance(d, dict):
        raise ConfigError(path, f"expected an object, got {type(d).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    for key in d:
        if key not in names:
            raise ConfigError(f"{path}.{key}", "unknown key")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(path, str(exc)) from None


def load_json(path: str | Path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise ConfigError("config", f"file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"{p}: malformed JSON ({exc})") from None
