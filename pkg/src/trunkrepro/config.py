"""Declarative experiment configuration.

The YAML vocabulary is the one used by the original TRUNK experiment files
(``seed``, ``dataset`` with ``train``/``validation``/``test`` splits,
``transform``, ``loss``, ``grouping_volatility``, ``lr_scheduler``,
``optimizer``, ``epochs``) so those files load unchanged.  A handful of
extension keys (``dataset.name``, ``model_backbone``, ``batch_norm_mode``,
``deterministic``, ``output_dir``, ``dataset.synthetic``) carry what the
original files leave to the command line.

Hyperparameters never fall back to defaults: a missing ``seed``,
``grouping_volatility``, ``epochs``, loss, optimizer or scheduler is a
validation error.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import os
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
import yaml

TRANSFORM_KINDS = (
    "ToTensor",
    "Normalize",
    "RandomCrop",
    "RandomHorizontalFlip",
    "RandomRotation",
    "ColorJitter",
    "RandAugment",
    "CutOut",
)
DATASETS = ("emnist", "cifar10", "svhn", "synthetic")
BACKBONES = ("mobilenet", "vgg")
LOSSES = ("NLLLoss", "CrossEntropyLoss")
NORM_MODES = ("batch", "layer")
SPLITS = ("train", "validation", "test")


class ConfigError(ValueError):
    """Raised for malformed or invalid experiment configuration."""


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise ConfigError(
                f"unknown transform kind {self.kind!r}; expected one of {', '.join(TRANSFORM_KINDS)}"
            )
        if self.kind == "Normalize":
            mean = self.params.get("mean")
            std = self.params.get("std")
            if mean is None or std is None:
                raise ConfigError("Normalize requires params.mean and params.std")
            if len(mean) != len(std):
                raise ConfigError(
                    f"Normalize mean has {len(mean)} entries but std has {len(std)}"
                )
            if any(float(s) <= 0 for s in std):
                raise ConfigError(f"Normalize std entries must be > 0, got {list(std)}")


@dataclass(frozen=True)
class SplitConfig:
    batch_size: int
    shuffle: bool
    num_workers: int = 0
    transforms: tuple[TransformSpec, ...] = ()

    def __post_init__(self):
        _check_type("batch_size", self.batch_size, int)
        _check_type("num_workers", self.num_workers, int)
        _check_type("shuffle", self.shuffle, bool)
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.num_workers < 0:
            raise ConfigError(f"num_workers must be >= 0, got {self.num_workers}")


@dataclass(frozen=True)
class ComponentSpec:
    """A ``type`` + ``params`` pair resolved by name against torch."""

    type: str
    params: dict = field(default_factory=dict)


@dataclass(frozen=True)
class TrainSpec:
    loss: str
    grouping_volatility: float
    optimizer: ComponentSpec
    lr_scheduler: ComponentSpec
    epochs: int
    batch_norm_mode: str = "batch"

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}; expected one of {', '.join(LOSSES)}")
        _check_type("grouping_volatility", self.grouping_volatility, float)
        if not self.grouping_volatility > 0:
            raise ConfigError(f"grouping_volatility must be > 0, got {self.grouping_volatility}")
        _check_type("epochs", self.epochs, int)
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_norm_mode not in NORM_MODES:
            raise ConfigError(f"batch_norm_mode must be one of {NORM_MODES}, got {self.batch_norm_mode!r}")
        if not hasattr(torch.optim, self.optimizer.type):
            raise ConfigError(f"unknown optimizer type {self.optimizer.type!r}")
        for key in ("lr", "weight_decay"):
            if key not in self.optimizer.params:
                raise ConfigError(f"missing field: optimizer.params.{key}")
        lr = self.optimizer.params["lr"]
        wd = self.optimizer.params["weight_decay"]
        if not isinstance(lr, (int, float)) or isinstance(lr, bool) or lr <= 0:
            raise ConfigError(f"optimizer lr must be a positive number, got {lr!r}")
        if not isinstance(wd, (int, float)) or isinstance(wd, bool) or wd < 0:
            raise ConfigError(f"optimizer weight_decay must be a non-negative number, got {wd!r}")
        if not hasattr(torch.optim.lr_scheduler, self.lr_scheduler.type):
            raise ConfigError(f"unknown lr_scheduler type {self.lr_scheduler.type!r}")
        if self.lr_scheduler.type == "CosineAnnealingLR":
            t_max = self.lr_scheduler.params.get("T_max")
            eta_min = self.lr_scheduler.params.get("eta_min")
            if t_max is None:
                raise ConfigError("missing field: lr_scheduler.params.T_max")
            if eta_min is None:
                raise ConfigError("missing field: lr_scheduler.params.eta_min")
            if not isinstance(t_max, int) or t_max < 1:
                raise ConfigError(f"T_max must be a positive integer, got {t_max!r}")
            if eta_min < 0:
                raise ConfigError(f"eta_min must be >= 0, got {eta_min!r}")


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the built-in Gaussian-blob dataset.

    ``supergroups`` lists category groups whose members share a coarse colour
    and differ only by ``fine_offset``; categories outside any listed group
    get their own coarse colour.
    """

    num_categories: int
    train_size: int
    test_size: int
    image_shape: tuple[int, int, int] = (3, 16, 16)
    noise: float = 0.05
    supergroups: tuple[tuple[int, ...], ...] = ()
    coarse_offset: float = 0.5
    fine_offset: float = 0.12
    constant: float | None = None

    def __post_init__(self):
        if self.num_categories < 1:
            raise ConfigError("synthetic.num_categories must be >= 1")
        if self.train_size < 1 or self.test_size < 1:
            raise ConfigError("synthetic train_size/test_size must be >= 1")
        if len(self.image_shape) != 3:
            raise ConfigError("synthetic.image_shape must be [C, H, W]")
        seen = [c for g in self.supergroups for c in g]
        if len(seen) != len(set(seen)) or any(not 0 <= c < self.num_categories for c in seen):
            raise ConfigError("synthetic.supergroups must be disjoint category indices")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    splits: dict
    training: TrainSpec
    dataset: str | None = None
    model_backbone: str | None = None
    output_dir: str = "runs"
    deterministic: bool = True
    validation_fraction: float = 0.1
    synthetic: SyntheticSpec | None = None

    def __post_init__(self):
        _check_type("seed", self.seed, int)
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        for name in SPLITS:
            if name not in self.splits:
                raise ConfigError(f"missing field: dataset.{name}")
        if self.dataset is not None and self.dataset not in DATASETS:
            raise ConfigError(f"unknown dataset {self.dataset!r}; supported: {', '.join(DATASETS)}")
        if self.model_backbone is not None and self.model_backbone not in BACKBONES:
            raise ConfigError(
                f"unknown model_backbone {self.model_backbone!r}; supported: {', '.join(BACKBONES)}"
            )
        if self.dataset == "synthetic" and self.synthetic is None:
            raise ConfigError("missing field: dataset.synthetic (required for the synthetic dataset)")
        if not 0 < self.validation_fraction < 1:
            raise ConfigError("validation_fraction must lie in (0, 1)")

    @property
    def grouping_volatility(self) -> float:
        return self.training.grouping_volatility


def _check_type(name, value, kind):
    if kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, kind)
    if not ok:
        raise ConfigError(f"{name} must be {kind.__name__}, got {type(value).__name__} ({value!r})")


# ---------------------------------------------------------------------------
# parsing


def _require(mapping, key, where=""):
    if not isinstance(mapping, dict) or key not in mapping or mapping[key] is None:
        raise ConfigError(f"missing field: {where}{key}")
    return mapping[key]


def _as_float(value, name):
    _check_type(name, value, float)
    return float(value)


def _component(raw, key):
    """Components are written as a one-element list of {type, params}."""
    value = _require(raw, key)
    if isinstance(value, list):
        if len(value) != 1:
            raise ConfigError(f"{key} must list exactly one component, got {len(value)}")
        value = value[0]
    if not isinstance(value, dict) or "type" not in value:
        raise ConfigError(f"missing field: {key}.type")
    params = value.get("params") or {}
    if not isinstance(params, dict):
        raise ConfigError(f"{key}.params must be a mapping")
    return ComponentSpec(type=str(value["type"]), params=dict(params))


def _transform(raw, where):
    if not isinstance(raw, dict) or "type" not in raw:
        raise ConfigError(f"missing field: {where}.type")
    params = raw.get("params") or {}
    if not isinstance(params, dict):
        raise ConfigError(f"{where}.params must be a mapping")
    return TransformSpec(kind=str(raw["type"]), params=_freeze_lists(params))


def _freeze_lists(params):
    return {k: list(v) if isinstance(v, (list, tuple)) else v for k, v in params.items()}


def _split(raw, name):
    where = f"dataset.{name}."
    params = _require(raw, "params", where)
    transforms = raw.get("transform") or []
    if not isinstance(transforms, list):
        raise ConfigError(f"{where}transform must be a list")
    return SplitConfig(
        batch_size=_require(params, "batch_size", where + "params."),
        shuffle=_require(params, "shuffle", where + "params."),
        num_workers=params.get("num_workers", 0),
        transforms=tuple(_transform(t, f"{where}transform[{i}]") for i, t in enumerate(transforms)),
    )


def _synthetic(raw):
    if raw is None:
        return None
    if not isinstance(raw, dict):
        raise ConfigError("dataset.synthetic must be a mapping")
    known = {f.name for f in dataclasses.fields(SyntheticSpec)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown synthetic keys: {sorted(unknown)}")
    kwargs = dict(raw)
    for key in ("num_categories", "train_size", "test_size"):
        _require(raw, key, "dataset.synthetic.")
    if "image_shape" in kwargs:
        kwargs["image_shape"] = tuple(kwargs["image_shape"])
    if "supergroups" in kwargs:
        kwargs["supergroups"] = tuple(tuple(g) for g in kwargs["supergroups"])
    return SyntheticSpec(**kwargs)


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Validate a parsed YAML mapping into an :class:`ExperimentConfig`."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    data = _require(raw, "dataset")
    if not isinstance(data, dict):
        raise ConfigError("dataset must be a mapping of splits")
    splits = {name: _split(_require(data, name, "dataset."), name) for name in SPLITS}
    loss = _component(raw, "loss")
    training = TrainSpec(
        loss=loss.type,
        grouping_volatility=_as_float(_require(raw, "grouping_volatility"), "grouping_volatility"),
        optimizer=_component(raw, "optimizer"),
        lr_scheduler=_component(raw, "lr_scheduler"),
        epochs=_require(raw, "epochs"),
        batch_norm_mode=raw.get("batch_norm_mode", "batch"),
    )
    extra = {}
    for key in ("output_dir", "deterministic", "model_backbone"):
        if key in raw:
            extra[key] = raw[key]
    if "validation_fraction" in data:
        extra["validation_fraction"] = data["validation_fraction"]
    if "deterministic" in extra:
        _check_type("deterministic", extra["deterministic"], bool)
    return ExperimentConfig(
        seed=_require(raw, "seed"),
        splits=splits,
        training=training,
        dataset=data.get("name"),
        synthetic=_synthetic(data.get("synthetic")),
        **extra,
    )


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f" at line {mark.line + 1}" if mark is not None else ""
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigError(f"malformed config {path}{line}: {problem}") from exc
    return config_from_dict(raw)


# ---------------------------------------------------------------------------
# serialization


def _transform_dict(t: TransformSpec):
    out = {"type": t.kind}
    if t.params:
        out["params"] = dict(t.params)
    return out


def config_to_dict(config: ExperimentConfig) -> dict:
    """Render keys in the original file order so saved files read like hand-written ones."""
    data: dict[str, Any] = {}
    if config.dataset is not None:
        data["name"] = config.dataset
    if config.synthetic is not None:
        syn = dataclasses.asdict(config.synthetic)
        syn["image_shape"] = list(syn["image_shape"])
        syn["supergroups"] = [list(g) for g in syn["supergroups"]]
        data["synthetic"] = syn
    if config.validation_fraction != 0.1:
        data["validation_fraction"] = config.validation_fraction
    for name in SPLITS:
        split = config.splits[name]
        entry: dict[str, Any] = {
            "params": {
                "batch_size": split.batch_size,
                "num_workers": split.num_workers,
                "shuffle": split.shuffle,
            }
        }
        if split.transforms:
            entry["transform"] = [_transform_dict(t) for t in split.transforms]
        data[name] = entry
    tr = config.training
    out: dict[str, Any] = {
        "seed": config.seed,
        "dataset": data,
        "loss": [{"type": tr.loss}],
        "grouping_volatility": tr.grouping_volatility,
        "lr_scheduler": [{"type": tr.lr_scheduler.type, "params": dict(tr.lr_scheduler.params)}],
        "optimizer": [{"type": tr.optimizer.type, "params": dict(tr.optimizer.params)}],
        "epochs": tr.epochs,
        "batch_norm_mode": tr.batch_norm_mode,
        "deterministic": config.deterministic,
        "output_dir": config.output_dir,
    }
    if config.model_backbone is not None:
        out["model_backbone"] = config.model_backbone
    return out


class _NoAliasDumper(yaml.SafeDumper):
    def ignore_aliases(self, data):
        return True


def dump_config(config: ExperimentConfig) -> str:
    return yaml.dump(
        config_to_dict(config), Dumper=_NoAliasDumper, sort_keys=False, default_flow_style=False
    )


def save_config(config: ExperimentConfig, path: str | os.PathLike) -> None:
    Path(path).write_text(dump_config(config), encoding="utf-8")


def config_digest(config: ExperimentConfig) -> str:
    """sha256 over everything that can influence results (not ``output_dir``)."""
    payload = config_to_dict(config)
    payload.pop("output_dir")
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def config_diff(a: ExperimentConfig, b: ExperimentConfig) -> list[str]:
    """Dotted keys whose rendered values differ between two configs."""
    flat_a = _flatten(config_to_dict(a))
    flat_b = _flatten(config_to_dict(b))
    return sorted(k for k in set(flat_a) | set(flat_b) if flat_a.get(k) != flat_b.get(k))


def _flatten(obj, prefix=""):
    out = {}
    if isinstance(obj, dict):
        for k, v in obj.items():
            out.update(_flatten(v, f"{prefix}{k}."))
    elif isinstance(obj, list) and obj and all(isinstance(v, dict) for v in obj):
        for i, v in enumerate(obj):
            out.update(_flatten(v, f"{prefix}{i}."))
    else:
        out[prefix[:-1]] = obj
    return out


# ---------------------------------------------------------------------------
# overrides


def _leaf_paths(obj, prefix=""):
    if dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from _leaf_paths(getattr(obj, f.name), f"{prefix}{f.name}.")
    elif isinstance(obj, dict):
        for k, v in obj.items():
            yield from _leaf_paths(v, f"{prefix}{k}.")
    else:
        yield prefix[:-1]


def valid_override_keys(config: ExperimentConfig) -> list[str]:
    return sorted(p for p in _leaf_paths(config) if ".transforms" not in p and not p.endswith("transforms"))


def _coerce(key, current, raw_value, widen=False):
    value = yaml.safe_load(raw_value) if isinstance(raw_value, str) else raw_value
    if isinstance(value, str) and isinstance(current, (int, float)) and not isinstance(current, bool):
        # YAML 1.1 reads "1e-3" as a string
        try:
            value = float(value)
        except ValueError:
            pass
    if current is None:
        return value
    if widen and isinstance(current, int) and not isinstance(current, bool) and isinstance(value, float):
        return value
    if isinstance(current, bool):
        ok = isinstance(value, bool)
    elif isinstance(current, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(current, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(current, str):
        ok = True
        value = str(value)
    elif isinstance(current, (list, tuple)):
        ok = isinstance(value, list)
        value = type(current)(value) if ok else value
    else:
        ok = type(value) is type(current)
    if not ok:
        raise ConfigError(
            f"type mismatch for {key}: expected {type(current).__name__}, got {raw_value!r}"
        )
    return value


def _set_path(obj, parts, value, key):
    head, rest = parts[0], parts[1:]
    if dataclasses.is_dataclass(obj):
        child = getattr(obj, head)
        new_child = _coerce(key, child, value) if not rest else _set_path(child, rest, value, key)
        return dataclasses.replace(obj, **{head: new_child})
    if isinstance(obj, dict):
        new = dict(obj)
        child = obj[head]
        new[head] = _coerce(key, child, value, widen=True) if not rest else _set_path(child, rest, value, key)
        return new
    raise ConfigError(f"cannot descend into {key}")


def apply_overrides(config: ExperimentConfig, overrides: list[str]) -> ExperimentConfig:
    """Return a re-validated copy with ``dotted.key=value`` overrides applied.

    >>> cfg = apply_overrides(cfg, ["training.grouping_volatility=1.02"])  # doctest: +SKIP
    """
    valid = valid_override_keys(config)
    result = config
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw_value = item.split("=", 1)
        key = key.strip()
        if key not in valid:
            raise ConfigError(f"unknown override key {key!r}; valid keys: {', '.join(valid)}")
        try:
            result = _set_path(result, key.split("."), raw_value.strip(), key)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid value for {key}: {exc}") from exc
    # round-trip through the dict form so every invariant is re-checked
    return config_from_dict(copy.deepcopy(config_to_dict(result)))


# ---------------------------------------------------------------------------
# seeding


def seed_all(seed: int, deterministic: bool = True) -> None:
    """Seed python, numpy and torch; request deterministic kernels if asked.

    Must be called before any data-loading workers are spawned.
    """
    if not isinstance(seed, int) or seed < 0:
        raise ValueError(f"seed must be a non-negative integer, got {seed!r}")
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    os.environ["PYTHONHASHSEED"] = str(seed)
    if deterministic:
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.backends.cudnn.deterministic = True
        torch.backends.cudnn.benchmark = False
    else:
        torch.use_deterministic_algorithms(False)
