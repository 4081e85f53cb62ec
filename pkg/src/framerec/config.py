"""Run configuration: nested sections, defaults, and strict YAML parsing.

Every key has a default; unknown keys are rejected with their full section
path so typos cannot silently fall back to defaults. The effective config is
echoed into every output directory.
"""

import dataclasses
from dataclasses import dataclass, field

import yaml

from .data import SynthConfig


class ConfigError(ValueError):
    """Raised for unparseable files, unknown keys, or bad values."""


@dataclass(frozen=True)
class DataConfig:
    interactions: str = ""      # path to the interactions TSV
    features: str = ""          # path to the feature manifest JSON
    synth: SynthConfig = field(default_factory=SynthConfig)


@dataclass(frozen=True)
class BackboneConfig:
    dim: int = 64
    blocks: int = 2
    heads: int = 2
    max_len: int = 10
    dropout: float = 0.2


@dataclass(frozen=True)
class TcdConfig:
    heads: int = 2
    time_dim: int = 32
    detach_target: bool = False
    train_refine_mode: str = "one_step"     # or "full_chain"


@dataclass(frozen=True)
class NpdConfig:
    blocks: int = 2
    heads: int = 2
    residual: bool = False                  # add x0 back onto the denoised output
    eval_start: str = "from_corrupted"      # or "from_noise"


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 2048
    epochs: int = 30
    lambda_T: float = 0.1
    lambda_N: float = 0.1
    T: int = 5
    gamma: float = 0.9
    seed: int = 0
    beta_start: float = 1e-4
    beta_end: float = 0.02
    grad_clip: float = 5.0
    patience: int = 10
    eval_every: int = 1
    t_sampling: str = "uniform_1_to_T"      # or "fixed_set"
    t_fixed_set: tuple = (5, 10, 15, 20, 25)
    variant: str = "full"


@dataclass(frozen=True)
class EvalConfig:
    ks: tuple = (10, 20)
    mask_history: bool = True
    split: str = "test"
    batch_size: int = 256


@dataclass(frozen=True)
class ExperimentConfig:
    variants: tuple = ("full", "no_tcd", "no_npd", "no_both")
    sigmas: tuple = (0.0, 0.1, 0.3, 0.5)
    lambda_T_grid: tuple = (0.01, 0.05, 0.1, 0.3, 0.5, 0.7, 0.9)
    lambda_N_grid: tuple = (0.01, 0.05, 0.1, 0.3, 0.5, 0.7, 0.9)
    T_grid: tuple = (5, 10, 15, 20, 25)
    seeds: tuple = (1, 2, 3)


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    tcd: TcdConfig = field(default_factory=TcdConfig)
    npd: NpdConfig = field(default_factory=NpdConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)


_CHOICES = {
    "tcd.train_refine_mode": ("one_step", "full_chain"),
    "npd.eval_start": ("from_corrupted", "from_noise"),
    "train.t_sampling": ("uniform_1_to_T", "fixed_set"),
    "train.variant": ("full", "no_tcd", "no_npd", "no_both"),
    "eval.split": ("val", "test"),
}


def _coerce(value, target_type, path):
    if target_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if target_type is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if target_type is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        if path in _CHOICES and value not in _CHOICES[path]:
            raise ConfigError(f"{path}: must be one of {_CHOICES[path]}, got {value!r}")
        return value
    if target_type is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return tuple(value)
    raise ConfigError(f"{path}: unsupported config type {target_type}")


def _merge(instance, overrides: dict, path: str = ""):
    fields = {f.name: f for f in dataclasses.fields(instance)}
    updates = {}
    for key, value in overrides.items():
        full = f"{path}.{key}" if path else key
        if key not in fields:
            raise ConfigError(f"unknown config key: {full}")
        current = getattr(instance, key)
        if dataclasses.is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{full}: expected a mapping of sub-keys")
            updates[key] = _merge(current, value, full)
        else:
            updates[key] = _coerce(value, type(current), full)
    return dataclasses.replace(instance, **updates)


def default_config() -> RunConfig:
    return RunConfig()


def config_from_dict(overrides: dict) -> RunConfig:
    if overrides is None:
        return RunConfig()
    if not isinstance(overrides, dict):
        raise ConfigError("config document must be a mapping of sections")
    return _merge(RunConfig(), overrides)


def parse_config(path) -> RunConfig:
    """Parse a YAML config file; empty files yield all defaults."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        document = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{path}:{mark.line + 1}" if mark is not None else str(path)
        raise ConfigError(f"{where}: config syntax error: {exc}") from None
    return config_from_dict(document)


def config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def write_config_echo(cfg: RunConfig, path):
    """Write the fully resolved config (including the seed under train.seed)."""
    doc = config_to_dict(cfg)

    def delist(node):
        if isinstance(node, dict):
            return {k: delist(v) for k, v in node.items()}
        if isinstance(node, tuple):
            return [delist(v) for v in node]
        return node

    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        yaml.safe_dump(delist(doc), fh, sort_keys=True, default_flow_style=False)
