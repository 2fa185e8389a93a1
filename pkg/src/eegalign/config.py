"""Run configuration: a strict, typed tree with dotted-key overrides.

The on-disk form is JSON with one object per section. Unknown sections
or keys are rejected with the full dotted path, defaults fill anything
omitted, and the resolved tree is embedded into every checkpoint so a
run can always be reproduced from its artifacts.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigError

# config key -> attribute name, where the key is not a valid identifier
_LOSS_ALIASES = {"lambda": "lam"}


@dataclass
class DataConfig:
    path: str | None = None
    channel_mask: list[int] | None = None
    time_window: list[int] | None = None


@dataclass
class EncoderConfig:
    kind: str = "linear"
    dim: int = 128


@dataclass
class FilterConfig:
    height: int = 5
    width: int = 5


@dataclass
class FusionConfig:
    strategy: str = "catf"
    heads: int = 1
    gate_bias_init: float = -2.0
    mix_init: float = 0.5


@dataclass
class BackboneConfig:
    dim: int = 64
    layers: int = 2
    heads: int = 4
    patch: int = 8
    prompts: int = 4
    mlp_ratio: int = 4


@dataclass
class LossConfig:
    mu: float = 0.6
    alpha: float = 0.3
    lam: float = 0.1
    beta: float = 0.3
    tau_init: float = 1.0 / 14.0
    detach_targets: bool = True


@dataclass
class TrainerConfig:
    epochs: int = 40
    batch_size: int = 32
    lr_a: float = 0.002
    lr_b: float = 0.02
    seed: int = 0
    clip_norm: float | None = None


@dataclass
class EvalConfig:
    ks: list[int] = field(default_factory=lambda: [1, 3, 5])


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def default_config() -> RunConfig:
    return RunConfig()


def _aliases_for(section: str) -> dict[str, str]:
    return _LOSS_ALIASES if section == "loss" else {}


def _coerce(path: str, expected, value):
    """Check/convert one leaf value against the dataclass default's type."""
    if expected is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if expected is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if expected is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if expected is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if expected is list:
        if value is None:
            return None
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{path}: expected a list of integers, got {value!r}")
        return list(value)
    raise ConfigError(f"{path}: unsupported value {value!r}")


# leaf type per (section, attribute); optional fields cannot infer their
# type from a None default, so everything is spelled out once here
_LEAF_TYPES = {
    ("data", "path"): str,
    ("data", "channel_mask"): list,
    ("data", "time_window"): list,
    ("encoder", "kind"): str,
    ("encoder", "dim"): int,
    ("filter", "height"): int,
    ("filter", "width"): int,
    ("fusion", "strategy"): str,
    ("fusion", "heads"): int,
    ("fusion", "gate_bias_init"): float,
    ("fusion", "mix_init"): float,
    ("backbone", "dim"): int,
    ("backbone", "layers"): int,
    ("backbone", "heads"): int,
    ("backbone", "patch"): int,
    ("backbone", "prompts"): int,
    ("backbone", "mlp_ratio"): int,
    ("loss", "mu"): float,
    ("loss", "alpha"): float,
    ("loss", "lam"): float,
    ("loss", "beta"): float,
    ("loss", "tau_init"): float,
    ("loss", "detach_targets"): bool,
    ("trainer", "epochs"): int,
    ("trainer", "batch_size"): int,
    ("trainer", "lr_a"): float,
    ("trainer", "lr_b"): float,
    ("trainer", "seed"): int,
    ("trainer", "clip_norm"): float,
    ("eval", "ks"): list,
}

_OPTIONAL = {("data", "path"), ("data", "channel_mask"), ("data", "time_window"), ("trainer", "clip_norm")}


def config_from_dict(tree: dict) -> RunConfig:
    """Build a RunConfig from a nested dict, rejecting unknown keys."""
    if not isinstance(tree, dict):
        raise ConfigError(f"config root must be an object, got {type(tree).__name__}")
    cfg = RunConfig()
    sections = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}
    for section_name, body in tree.items():
        if section_name not in sections:
            raise ConfigError(f"unknown config section {section_name!r}")
        if not isinstance(body, dict):
            raise ConfigError(f"{section_name}: expected an object, got {body!r}")
        section = sections[section_name]
        aliases = _aliases_for(section_name)
        known = {f.name for f in dataclasses.fields(section)}
        for key, value in body.items():
            attr = aliases.get(key, key)
            if attr not in known:
                raise ConfigError(f"unknown config key {section_name}.{key}")
            if value is None and (section_name, attr) in _OPTIONAL:
                setattr(section, attr, None)
                continue
            expected = _LEAF_TYPES[(section_name, attr)]
            setattr(section, attr, _coerce(f"{section_name}.{key}", expected, value))
    validate_config(cfg)
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    """Nested plain-dict form with the public key spelling."""
    out: dict = {}
    for f in dataclasses.fields(cfg):
        section = getattr(cfg, f.name)
        aliases = {attr: key for key, attr in _aliases_for(f.name).items()}
        body = {}
        for sf in dataclasses.fields(section):
            body[aliases.get(sf.name, sf.name)] = getattr(section, sf.name)
        out[f.name] = body
    return out


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            tree = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    return config_from_dict(tree)


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config_to_dict(cfg), fh, indent=2)
        fh.write("\n")


def _parse_override_value(raw: str):
    """Interpret a CLI string: JSON first, bare words as strings."""
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(cfg: RunConfig, overrides: dict[str, str]) -> RunConfig:
    """Apply dotted-key string overrides (`loss.mu` -> `"0.9"`) in place."""
    sections = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}
    for dotted, raw in overrides.items():
        if dotted.count(".") != 1:
            raise ConfigError(f"override key must be section.key, got {dotted!r}")
        section_name, key = dotted.split(".")
        if section_name not in sections:
            raise ConfigError(f"unknown config section {section_name!r} in override {dotted!r}")
        section = sections[section_name]
        attr = _aliases_for(section_name).get(key, key)
        if attr not in {f.name for f in dataclasses.fields(section)}:
            raise ConfigError(f"unknown config key {dotted}")
        value = _parse_override_value(raw)
        if value is None and (section_name, attr) in _OPTIONAL:
            setattr(section, attr, None)
            continue
        setattr(section, attr, _coerce(dotted, _LEAF_TYPES[(section_name, attr)], value))
    validate_config(cfg)
    return cfg


def validate_config(cfg: RunConfig) -> None:
    """Cross-field checks that individual setters cannot express."""
    if cfg.trainer.batch_size < 2:
        raise ConfigError(f"trainer.batch_size must be >= 2, got {cfg.trainer.batch_size}")
    if cfg.trainer.epochs < 0:
        raise ConfigError(f"trainer.epochs must be >= 0, got {cfg.trainer.epochs}")
    if cfg.trainer.lr_a <= 0 or cfg.trainer.lr_b <= 0:
        raise ConfigError(
            f"learning rates must be positive, got lr_a={cfg.trainer.lr_a} lr_b={cfg.trainer.lr_b}"
        )
    if cfg.trainer.clip_norm is not None and cfg.trainer.clip_norm <= 0:
        raise ConfigError(f"trainer.clip_norm must be positive, got {cfg.trainer.clip_norm}")
    if cfg.fusion.strategy not in ("catf", "bilinear"):
        raise ConfigError(f"fusion.strategy must be 'catf' or 'bilinear', got {cfg.fusion.strategy!r}")
    if cfg.loss.mu < 0 or cfg.loss.alpha < 0 or cfg.loss.lam < 0:
        raise ConfigError("loss weights mu, alpha, lambda must be >= 0")
    if not 0.0 <= cfg.loss.beta <= 1.0:
        raise ConfigError(f"loss.beta must lie in [0, 1], got {cfg.loss.beta}")
    if cfg.loss.tau_init <= 0:
        raise ConfigError(f"loss.tau_init must be positive, got {cfg.loss.tau_init}")
    if not cfg.eval.ks or any(k < 1 for k in cfg.eval.ks):
        raise ConfigError(f"eval.ks must be positive integers, got {cfg.eval.ks}")
    window = cfg.data.time_window
    if window is not None and (len(window) != 2 or window[0] < 0 or window[0] >= window[1]):
        raise ConfigError(f"data.time_window must be [start, stop) with start < stop, got {window}")
