"""Experiment configuration: JSON files, dotted-path overrides, validation.

Every field has a default; a handful (augmentation flip, eval grid,
eps_max, best_eps) resolve per dataset when left null.  Validation
happens before any work starts and reports every offending key at once.
Unknown keys are rejected.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path

MNIST_GRID = (0.0, 0.05, 0.1, 0.2, 0.3)
CIFAR_GRID = (0.0, 2 / 255, 4 / 255, 8 / 255, 16 / 255)


class ConfigError(Exception):
    """One or more invalid configuration entries; message lists all of them."""


@dataclass
class DatasetBlock:
    name: str = "mnist"              # mnist | cifar10
    dir: str = "data"                # directory with the official files
    subset: int | None = None        # first N train examples
    test_subset: int | None = None   # first N test examples
    crop_pad: int = 4                # random-crop zero padding; 0 disables
    hflip: bool | None = None        # null: True for cifar10, False for mnist


@dataclass
class ModelBlock:
    arch_id: str = "convnet"         # mlp | convnet
    width_factor: int = 1
    seed: int | None = None          # null: use train.seed
    precision: str = "single"


@dataclass
class TrainBlock:
    mode: str = "saat"               # natural | standard_at | saat
    epochs: int = 20
    batch_size: int = 128
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_drops: list = field(default_factory=lambda: [[10, 10.0], [15, 10.0]])
    seed: int = 0
    eval_every: int = 1
    best_metric: str = "robust_acc_at_eps"


@dataclass
class AttackBlock:
    rho: float = 1.5                 # minimum adversarial loss; "inf" allowed
    eps_max: float | None = None     # null: 0.3 for mnist, 8/255 for cifar10
    tau: float = 2 / 255
    k_steps: int = 3
    alpha: float = 2 / 255
    pgd_iters: int = 10
    random_start: bool = True        # fixed-budget pgd only


@dataclass
class EvalBlock:
    grid: list | None = None         # null: per-dataset default grid
    pgd_iters: int = 20
    alpha: float | None = None       # null: eps / 8 per grid point
    random_start: bool = False
    subset: int | None = None        # test examples per eval epoch
    best_eps: float | None = None    # null: 0.1 for mnist, 8/255 for cifar10
    batch_size: int = 256


@dataclass
class OutputBlock:
    dir: str = "runs/run"
    tag: str = ""


@dataclass
class ExperimentConfig:
    dataset: DatasetBlock = field(default_factory=DatasetBlock)
    model: ModelBlock = field(default_factory=ModelBlock)
    train: TrainBlock = field(default_factory=TrainBlock)
    attack: AttackBlock = field(default_factory=AttackBlock)
    eval: EvalBlock = field(default_factory=EvalBlock)
    output: OutputBlock = field(default_factory=OutputBlock)

    def resolved(self) -> "ExperimentConfig":
        """Fill dataset-dependent null fields with their documented defaults."""
        cfg = from_dict(to_dict(self))  # deep copy
        is_mnist = cfg.dataset.name == "mnist"
        if cfg.dataset.hflip is None:
            cfg.dataset.hflip = not is_mnist
        if cfg.model.seed is None:
            cfg.model.seed = cfg.train.seed
        if cfg.attack.eps_max is None:
            cfg.attack.eps_max = 0.3 if is_mnist else 8 / 255
        if cfg.eval.grid is None:
            cfg.eval.grid = list(MNIST_GRID if is_mnist else CIFAR_GRID)
        if cfg.eval.best_eps is None:
            cfg.eval.best_eps = 0.1 if is_mnist else 8 / 255
        return cfg


_BLOCKS = {f.name: f.type for f in fields(ExperimentConfig)}
_BLOCK_TYPES = {
    "dataset": DatasetBlock, "model": ModelBlock, "train": TrainBlock,
    "attack": AttackBlock, "eval": EvalBlock, "output": OutputBlock,
}

_FIELD_TYPES = {
    ("dataset", "name"): str, ("dataset", "dir"): str,
    ("dataset", "subset"): (int, type(None)), ("dataset", "test_subset"): (int, type(None)),
    ("dataset", "crop_pad"): int, ("dataset", "hflip"): (bool, type(None)),
    ("model", "arch_id"): str, ("model", "width_factor"): int,
    ("model", "seed"): (int, type(None)), ("model", "precision"): str,
    ("train", "mode"): str, ("train", "epochs"): int, ("train", "batch_size"): int,
    ("train", "lr"): float, ("train", "momentum"): float, ("train", "weight_decay"): float,
    ("train", "lr_drops"): list, ("train", "seed"): int, ("train", "eval_every"): int,
    ("train", "best_metric"): str,
    ("attack", "rho"): float, ("attack", "eps_max"): (float, type(None)),
    ("attack", "tau"): float, ("attack", "k_steps"): int, ("attack", "alpha"): float,
    ("attack", "pgd_iters"): int, ("attack", "random_start"): bool,
    ("eval", "grid"): (list, type(None)), ("eval", "pgd_iters"): int,
    ("eval", "alpha"): (float, type(None)), ("eval", "random_start"): bool,
    ("eval", "subset"): (int, type(None)), ("eval", "best_eps"): (float, type(None)),
    ("eval", "batch_size"): int,
    ("output", "dir"): str, ("output", "tag"): str,
}


def _coerce(block: str, key: str, value, errors: list[str]):
    want = _FIELD_TYPES[(block, key)]
    wants_float = want is float or (isinstance(want, tuple) and float in want)
    wants_int = want is int or (isinstance(want, tuple) and int in want)
    if wants_float:
        if isinstance(value, str) and value.lower() in ("inf", "+inf", "infinity"):
            return float("inf")
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    if wants_int and isinstance(value, int) and not isinstance(value, bool):
        return value
    if isinstance(value, want if isinstance(want, tuple) else (want,)):
        if isinstance(value, bool) and not (want is bool or (isinstance(want, tuple) and bool in want)):
            errors.append(f"{block}.{key}: expected {want}, got boolean")
            return value
        return value
    errors.append(f"{block}.{key}: expected {_type_name(want)}, got {value!r}")
    return value


def _type_name(want) -> str:
    if isinstance(want, tuple):
        return " or ".join(t.__name__ for t in want)
    return want.__name__


def from_dict(raw: dict) -> ExperimentConfig:
    """Build a config from nested dicts, rejecting unknown keys all at once."""
    errors: list[str] = []
    cfg = ExperimentConfig()
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be an object, got {type(raw).__name__}")
    for block_name, payload in raw.items():
        if block_name not in _BLOCK_TYPES:
            errors.append(f"unknown config block {block_name!r}")
            continue
        if not isinstance(payload, dict):
            errors.append(f"{block_name}: expected an object of settings")
            continue
        block = getattr(cfg, block_name)
        known = {f.name for f in fields(_BLOCK_TYPES[block_name])}
        for key, value in payload.items():
            if key not in known:
                errors.append(f"unknown config key {block_name}.{key}")
                continue
            setattr(block, key, _coerce(block_name, key, value, errors))
    if errors:
        raise ConfigError("invalid configuration:\n  " + "\n  ".join(errors))
    return cfg


def to_dict(cfg: ExperimentConfig) -> dict:
    return asdict(cfg)


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
    return from_dict(raw)


def parse_set_value(text: str):
    """Interpret an override value: JSON if it parses, bare string otherwise."""
    if text.lower() in ("inf", "+inf", "infinity"):
        return float("inf")
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: ExperimentConfig, pairs: list[str]) -> ExperimentConfig:
    """Apply repeatable --set block.key=value overrides."""
    errors: list[str] = []
    raw = to_dict(cfg)
    for pair in pairs:
        if "=" not in pair:
            errors.append(f"override {pair!r} is not of the form block.key=value")
            continue
        path, value = pair.split("=", 1)
        parts = path.split(".")
        if len(parts) != 2:
            errors.append(f"override path {path!r} must be block.key")
            continue
        block, key = parts
        if block not in _BLOCK_TYPES:
            errors.append(f"unknown config block {block!r} in override {pair!r}")
            continue
        if key not in {f.name for f in fields(_BLOCK_TYPES[block])}:
            errors.append(f"unknown config key {block}.{key} in override {pair!r}")
            continue
        raw[block][key] = parse_set_value(value)
    if errors:
        raise ConfigError("invalid overrides:\n  " + "\n  ".join(errors))
    return from_dict(raw)


def snapshot(cfg: ExperimentConfig, path) -> None:
    """Write the resolved config; rerunning from it reproduces the run."""
    with open(path, "w") as fh:
        json.dump(to_dict(cfg), fh, indent=2, sort_keys=True)
        fh.write("\n")
