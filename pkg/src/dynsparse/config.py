"""Run configuration: flat key=value files, command-line overrides, defaults.

Precedence is command line > config file > built-in default, resolved before
any seeding. The DYNSPARSE_SEED environment variable, when set, outranks all
three for the seed field.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass

TASKS = ("mnist", "lm")
RUN_MODES = ("dense", "dynamic", "static_agp", "small_dense")

SEED_ENV_VAR = "DYNSPARSE_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    task: str = "mnist"
    mode: str = "dynamic"
    seed: int = 0
    epochs: int = 5
    batch_size: int = 64
    # architecture
    hidden: int = 512
    layers: int = 2
    block: int = 64
    sparsity: float = 0.9
    key_fraction: float = 0.0  # 0 = task default (1.0 mnist, 0.25 lm)
    embed: int = 0  # 0 = same as hidden
    dropout: float = 0.0
    shared_gates: bool = False
    gate_bias: float = 0.1
    seg_len: int = 35
    input_dim: int = 784
    num_classes: int = 10
    # optimizer
    optimizer: str = "auto"  # auto | sgd_momentum | adam
    lr: float = 0.0  # 0 = task default (5e-3 mnist, 1e-3 lm)
    momentum: float = 0.9
    clip_norm: float = -1.0  # -1 = task default (none mnist, 5 lm); 0 = off
    # sparseness ramp (dynamic mode); 0/0 = constant level from the start
    ramp_start: float = 0.0
    ramp_end: float = 0.0
    # static pruning schedule (static_agp mode); 0 end = mirror the ramp
    prune_start: float = 0.0
    prune_end: float = 0.0
    prune_frequency: int = 1
    # data paths
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    train_text: str = ""
    valid_text: str = ""
    test_text: str = ""
    # artifacts
    out_dir: str = "runs/latest"
    checkpoint: str = ""
    # analysis
    layer_index: int = -1  # -1 = last gated layer

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.mode not in RUN_MODES:
            raise ConfigError(f"mode must be one of {RUN_MODES}, got {self.mode!r}")
        if not 0.0 <= self.sparsity < 1.0:
            raise ConfigError(f"sparsity must be in [0, 1), got {self.sparsity}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be non-negative, got {self.epochs}")
        if self.batch_size < 1 or self.seg_len < 1:
            raise ConfigError("batch_size and seg_len must be positive")

    # resolved task defaults ------------------------------------------------

    def resolved_key_fraction(self):
        if self.key_fraction > 0:
            return self.key_fraction
        return 1.0 if self.task == "mnist" else 0.25

    def resolved_optimizer(self):
        if self.optimizer != "auto":
            return self.optimizer
        return "sgd_momentum" if self.task == "mnist" else "adam"

    def resolved_lr(self):
        if self.lr > 0:
            return self.lr
        return 5e-3 if self.task == "mnist" else 1e-3

    def resolved_clip_norm(self):
        if self.clip_norm < 0:
            return None if self.task == "mnist" else 5.0
        return self.clip_norm if self.clip_norm > 0 else None

    def resolved_embed(self):
        return self.embed if self.embed > 0 else self.hidden


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name, raw):
    if name not in _FIELDS:
        raise ConfigError(f"unknown config key {name!r}")
    target = _FIELDS[name].type
    raw = raw.strip()
    try:
        if target == "int":
            return int(raw)
        if target == "float":
            return float(raw)
        if target == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value {raw!r} for key {name!r}") from exc


def parse_config_file(path):
    """Flat ``key = value`` lines; blank lines and #-comments ignored."""
    values = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = body.split("=", 1)
        values[key.strip()] = raw.strip()
    return values


def resolve_config(config_file=None, overrides=None, env=None):
    """Layer the three sources into a RunConfig, then apply the seed
    environment override."""
    merged = {}
    if config_file:
        merged.update(parse_config_file(config_file))
    if overrides:
        merged.update(overrides)
    values = {name: _coerce(name, raw) for name, raw in merged.items()}
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    env = os.environ if env is None else env
    seed_override = env.get(SEED_ENV_VAR)
    if seed_override is not None:
        try:
            cfg.seed = int(seed_override)
        except ValueError as exc:
            raise ConfigError(
                f"{SEED_ENV_VAR} must be an integer, got {seed_override!r}") from exc
    return cfg


def config_snapshot(cfg):
    """JSON-ready mapping of every field, for checkpoint embedding."""
    return dataclasses.asdict(cfg)


def config_from_snapshot(snapshot):
    known = {k: v for k, v in snapshot.items() if k in _FIELDS}
    return RunConfig(**known)


def require_paths(cfg, names):
    for name in names:
        path = getattr(cfg, name)
        if not path:
            raise ConfigError(f"config key {name!r} is required for this command")
        if not os.path.exists(path):
            raise ConfigError(f"{name} path does not exist: {path}")
