"""Flat ``key = value`` config files ('#' starts a comment) mapped onto dataclasses."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Any, TypeVar, get_type_hints

C = TypeVar("C")

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 4
    epochs: int = 50
    max_steps: int = 0  # 0 = no cap beyond epochs
    n_layers: int = 3
    width: int = 32
    reduction: int = 16
    channel_act: str = "sigmoid"
    seed: int = 0
    data_root: str = "data"
    train_split: str = "train"
    val_split: str = "val"
    checkpoint: str = "model.mldd1"
    out_dir: str = "runs"
    multiscale: bool = True

    def __post_init__(self):
        for name in ("batch_size", "epochs", "width", "reduction"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.lr < 0 or self.max_steps < 0 or self.seed < 0:
            raise ConfigError("lr, max_steps and seed must be non-negative")
        if not 1 <= self.n_layers <= 3:
            raise ConfigError(f"n_layers must lie in [1, 3], got {self.n_layers}")
        if self.channel_act not in ("sigmoid", "softmax"):
            raise ConfigError(f"channel_act must be sigmoid or softmax, got {self.channel_act!r}")


def parse_kv(text: str, source: str = "<config>") -> dict[str, tuple[str, int]]:
    """Return ``{key: (raw value, line number)}``."""
    out: dict[str, tuple[str, int]] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r} (first on line {out[key][1]})")
        out[key] = (value, lineno)
    return out


def _coerce(raw: str, typ: Any) -> Any:
    if typ is bool:
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if typ is int:
        return int(raw)
    if typ is float:
        return float(raw)
    return raw


def build(cls: type[C], text: str = "", source: str = "<config>", **overrides) -> C:
    """Instantiate dataclass ``cls`` from config text; keyword overrides win."""
    hints = get_type_hints(cls)
    fields = {f.name for f in dataclasses.fields(cls) if f.init}
    kwargs: dict[str, Any] = {}
    for key, (raw, lineno) in parse_kv(text, source).items():
        if key not in fields:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            kwargs[key] = _coerce(raw, hints[key])
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from exc
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load(cls: type[C], path: str | Path | None, **overrides) -> C:
    if path is None:
        return build(cls, "", "<defaults>", **overrides)
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    return build(cls, text, str(p), **overrides)


def dump(cfg) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"
