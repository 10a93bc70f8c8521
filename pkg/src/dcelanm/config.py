"""Training configuration and the ``key = value`` config-file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .network import NetworkConfig


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-4
    epochs: int = 500
    batch: int = 8
    micro_batch: int = 2  # samples per forward/backward; gradients are accumulated up to `batch`
    seed: int = 0
    multiscale: bool = False
    freeze_cnn: bool = False  # MAE pretraining: train only Micro-MAE weights
    threshold: float = 0.5
    target_dice: float = 0.0  # stop once train mDice reaches this (0 disables)
    eval_every: int = 1
    bn_recalibrate: int = 8  # chunk size for recomputing batch-norm statistics before eval (0 disables)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def validate(self) -> "TrainConfig":
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.batch < 1 or self.micro_batch < 1:
            raise ConfigError("batch and micro_batch must be >= 1")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold must lie in [0, 1], got {self.threshold}")
        if self.bn_recalibrate < 0:
            raise ConfigError("bn_recalibrate must be >= 0")
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(name: str, text: str, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "on", "yes", "1"):
                return True
            if low in ("false", "off", "no", "0"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def apply_overrides(net_cfg: NetworkConfig, train_cfg: TrainConfig, values: dict) -> tuple[NetworkConfig, TrainConfig]:
    """Set fields by name; ``net.``/``train.`` prefixes disambiguate, bare keys
    are looked up in both."""
    net_fields = {f.name: f for f in fields(NetworkConfig)}
    train_fields = {f.name: f for f in fields(TrainConfig)}
    net_upd, train_upd = {}, {}
    for key, value in values.items():
        scope, _, name = key.rpartition(".")
        if scope not in ("", "net", "train"):
            raise ConfigError(f"unknown config scope in {key!r}")
        in_net = name in net_fields and scope in ("", "net")
        in_train = name in train_fields and scope in ("", "train")
        if not (in_net or in_train):
            raise ConfigError(f"unknown config key {key!r}")
        if in_net:
            net_upd[name] = _coerce(key, value, getattr(net_cfg, name)) if isinstance(value, str) else value
        if in_train:
            train_upd[name] = _coerce(key, value, getattr(train_cfg, name)) if isinstance(value, str) else value
    return dataclasses.replace(net_cfg, **net_upd), dataclasses.replace(train_cfg, **train_upd)


def load_config(path=None, overrides: dict | None = None) -> tuple[NetworkConfig, TrainConfig]:
    net_cfg, train_cfg = NetworkConfig(), TrainConfig()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        net_cfg, train_cfg = apply_overrides(net_cfg, train_cfg, parse_config_text(text, str(path)))
    if overrides:
        net_cfg, train_cfg = apply_overrides(net_cfg, train_cfg, overrides)
    try:
        net_cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return net_cfg, train_cfg.validate()


def config_to_text(net_cfg: NetworkConfig, train_cfg: TrainConfig | None = None, extra: dict | None = None) -> str:
    lines = [f"net.{k} = {format_value(v)}" for k, v in net_cfg.to_dict().items()]
    if train_cfg is not None:
        lines += [f"train.{k} = {format_value(v)}" for k, v in train_cfg.to_dict().items()]
    for k, v in (extra or {}).items():
        lines.append(f"{k} = {format_value(v)}")
    return "\n".join(lines) + "\n"
