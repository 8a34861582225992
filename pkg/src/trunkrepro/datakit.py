"""Dataset ingestion and augmentation pipelines.

Images are held in memory as ``uint8`` tensors of shape ``(N, C, H, W)``; the
augmentation pipeline converts them to ``float32`` in ``[0, 1]`` (``ToTensor``)
and normalises them.  EMNIST, CIFAR-10 and SVHN are read through torchvision
from a local data root; the synthetic Gaussian-blob dataset is generated on the
fly for desk-scale runs.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.utils.data import DataLoader, Dataset
from torchvision.transforms import v2

from .config import ConfigError, ExperimentConfig, SyntheticSpec, TransformSpec

DATA_ROOT_ENV = "TRUNK_DATA_ROOT"


class DatasetUnavailableError(RuntimeError):
    """Raised when dataset files are missing and downloading is disabled."""


@dataclass(frozen=True)
class DatasetHandle:
    name: str
    image_shape: tuple[int, int, int]
    num_categories: int
    train_size: int
    test_size: int
    category_names: tuple[str, ...] = ()


_EMNIST_BALANCED = tuple("0123456789ABCDEFGHIJKLMNOPQRSTUVWXYZabdefghnqrt")
_CIFAR10 = ("airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck")

DATASETS = {
    "emnist": DatasetHandle("emnist", (1, 28, 28), 47, 112_800, 18_800, _EMNIST_BALANCED),
    "cifar10": DatasetHandle("cifar10", (3, 32, 32), 10, 50_000, 10_000, _CIFAR10),
    "svhn": DatasetHandle("svhn", (3, 32, 32), 10, 73_257, 26_032, tuple(str(i) for i in range(10))),
}

# directory (relative to the data root) holding each dataset's raw archives
_RAW_DIRS = {"emnist": "EMNIST/raw", "cifar10": "cifar-10-batches-py", "svhn": "."}
_RAW_GLOBS = {"emnist": "*", "cifar10": "*", "svhn": "*_32x32.mat"}


def dataset_handle(name: str, config: ExperimentConfig | None = None) -> DatasetHandle:
    if name == "synthetic":
        if config is None or config.synthetic is None:
            raise ConfigError("the synthetic dataset needs a config with dataset.synthetic")
        spec = config.synthetic
        return DatasetHandle(
            "synthetic",
            tuple(spec.image_shape),
            spec.num_categories,
            spec.train_size,
            spec.test_size,
            tuple(f"c{i}" for i in range(spec.num_categories)),
        )
    if name not in DATASETS:
        raise ValueError(f"unknown dataset {name!r}; supported: {', '.join([*DATASETS, 'synthetic'])}")
    return DATASETS[name]


@dataclass
class ImageSet:
    """Labelled images.  ``categories`` always holds the original category ids,
    ``labels`` the (possibly relabelled) training targets."""

    images: torch.Tensor
    labels: torch.Tensor
    categories: torch.Tensor
    category_names: list = field(default_factory=list)
    name: str = ""

    def __len__(self):
        return int(self.labels.shape[0])

    def subset(self, index) -> "ImageSet":
        index = torch.as_tensor(index, dtype=torch.long)
        return ImageSet(self.images[index], self.labels[index], self.categories[index],
                        list(self.category_names), self.name)


def data_root(root: str | os.PathLike | None = None) -> Path:
    if root is not None:
        return Path(root)
    env = os.environ.get(DATA_ROOT_ENV)
    if env:
        return Path(env)
    return Path.home() / ".cache" / "trunkrepro" / "data"


# ---------------------------------------------------------------------------
# synthetic Gaussian blobs


def _coarse_colours(n_groups: int, channels: int, spread: float) -> np.ndarray:
    out = np.full((n_groups, channels), 0.5)
    if n_groups == 1:
        return out
    theta = 2 * np.pi * np.arange(n_groups) / n_groups
    if channels == 1:
        out[:, 0] = 0.5 + spread * (np.arange(n_groups) / (n_groups - 1) - 0.5)
    elif channels == 2:
        out[:, 0] = 0.5 + spread / 2 * np.cos(theta)
        out[:, 1] = 0.5 + spread / 2 * np.sin(theta)
    else:
        for ch in range(channels):
            out[:, ch] = 0.5 + spread / 2 * np.cos(theta + 2 * np.pi * ch / channels)
    return out


def synthetic_colours(spec: SyntheticSpec) -> np.ndarray:
    """Per-category mean colour: shared coarse colour per supergroup plus a
    brightness shift of ``fine_offset`` between members."""
    groups = [list(g) for g in spec.supergroups]
    grouped = {c for g in groups for c in g}
    groups += [[c] for c in range(spec.num_categories) if c not in grouped]
    groups.sort(key=min)
    channels = spec.image_shape[0]
    coarse = _coarse_colours(len(groups), channels, spec.coarse_offset)
    colours = np.zeros((spec.num_categories, channels))
    for g, members in enumerate(groups):
        members = sorted(members)
        for m, cat in enumerate(members):
            colours[cat] = coarse[g] + spec.fine_offset * (m - (len(members) - 1) / 2)
    return np.clip(colours, 0.0, 1.0)


def _balanced_counts(total: int, k: int) -> list[int]:
    return [total // k + (1 if i < total % k else 0) for i in range(k)]


def make_synthetic(spec: SyntheticSpec, split: str, seed: int) -> ImageSet:
    """Gaussian-blob images; deterministic in ``(spec, split, seed)``."""
    total = spec.train_size if split == "train" else spec.test_size
    offset = 0 if split == "train" else 1
    rng = np.random.default_rng([seed, offset])
    c, h, w = spec.image_shape
    counts = _balanced_counts(total, spec.num_categories)
    labels = np.repeat(np.arange(spec.num_categories), counts)
    if spec.constant is not None:
        images = np.full((total, c, h, w), spec.constant)
    else:
        colours = synthetic_colours(spec)
        yy, xx = np.mgrid[0:h, 0:w]
        sigma = max(h, w) / 3.0
        cy = (h - 1) / 2 + rng.uniform(-h / 8, h / 8, size=total)
        cx = (w - 1) / 2 + rng.uniform(-w / 8, w / 8, size=total)
        blob = np.exp(-((yy[None] - cy[:, None, None]) ** 2 + (xx[None] - cx[:, None, None]) ** 2)
                      / (2 * sigma**2))
        images = 0.5 + (colours[labels][:, :, None, None] - 0.5) * blob[:, None]
        images = images + spec.noise * rng.standard_normal(images.shape)
    images = np.clip(np.rint(images * 255), 0, 255).astype(np.uint8)
    labels_t = torch.from_numpy(labels.astype(np.int64))
    return ImageSet(torch.from_numpy(images), labels_t, labels_t.clone(),
                    [f"c{i}" for i in range(spec.num_categories)], "synthetic")


# ---------------------------------------------------------------------------
# public datasets


def _load_torchvision(name: str, train: bool, root: Path, download: bool) -> ImageSet:
    from torchvision import datasets

    try:
        if name == "cifar10":
            ds = datasets.CIFAR10(str(root), train=train, download=download)
            images = torch.from_numpy(ds.data).permute(0, 3, 1, 2).contiguous()
            labels = torch.tensor(ds.targets, dtype=torch.long)
            names = list(ds.classes)
        elif name == "svhn":
            ds = datasets.SVHN(str(root), split="train" if train else "test", download=download)
            images = torch.from_numpy(ds.data)
            labels = torch.from_numpy(ds.labels.astype(np.int64))
            names = [str(i) for i in range(10)]
        elif name == "emnist":
            ds = datasets.EMNIST(str(root), split="balanced", train=train, download=download)
            # EMNIST arrays are stored transposed
            images = ds.data.transpose(1, 2).unsqueeze(1).contiguous()
            labels = ds.targets.long()
            names = list(ds.classes)
        else:  # pragma: no cover - guarded by dataset_handle
            raise ValueError(name)
    except RuntimeError as exc:
        expected = root / _RAW_DIRS[name]
        raise DatasetUnavailableError(
            f"{name} not found under {expected} and downloads are disabled; place the raw "
            f"archives there, point ${DATA_ROOT_ENV} at a directory holding them, or enable "
            f"download ({exc})"
        ) from exc
    return ImageSet(images, labels, labels.clone(), names, name)


def load_raw(name: str, train: bool, config: ExperimentConfig | None = None,
             root: str | os.PathLike | None = None, download: bool = False) -> ImageSet:
    """The full train or test archive, before any validation carve."""
    if name == "synthetic":
        handle = dataset_handle(name, config)  # validates config
        del handle
        return make_synthetic(config.synthetic, "train" if train else "test", config.seed)
    dataset_handle(name)
    return _load_torchvision(name, train, data_root(root), download)


def carve_validation(data: ImageSet, fraction: float, seed: int) -> tuple[ImageSet, ImageSet]:
    """Stratified, seed-deterministic split of ``data`` into (train, validation).

    Every category with at least two images contributes ``ceil(fraction * n)``
    images to validation.
    """
    gen = torch.Generator().manual_seed(seed)
    train_idx, val_idx = [], []
    for cat in torch.unique(data.categories).tolist():
        idx = torch.nonzero(data.categories == cat).flatten()
        idx = idx[torch.randperm(len(idx), generator=gen)]
        n_val = math.ceil(fraction * len(idx)) if len(idx) > 1 else 0
        val_idx.append(idx[:n_val])
        train_idx.append(idx[n_val:])
    train = torch.sort(torch.cat(train_idx)).values
    val = torch.sort(torch.cat(val_idx)).values
    return data.subset(train), data.subset(val)


def get_split(name: str, split: str, config: ExperimentConfig,
              root: str | os.PathLike | None = None, download: bool = False,
              cap: int | None = None) -> ImageSet:
    """Materialise one split.  ``train`` excludes the carved validation images."""
    if split not in ("train", "validation", "test"):
        raise ValueError(f"unknown split {split!r}")
    if split == "test":
        data = load_raw(name, False, config, root, download)
    else:
        train, val = carve_validation(load_raw(name, True, config, root, download),
                                      config.validation_fraction, config.seed)
        data = train if split == "train" else val
    if cap is not None and len(data) > cap:
        data = _stratified_cap(data, cap, config.seed)
    return data


def _stratified_cap(data: ImageSet, cap: int, seed: int) -> ImageSet:
    gen = torch.Generator().manual_seed(seed + 1)
    cats = torch.unique(data.categories).tolist()
    per = _balanced_counts(cap, len(cats))
    keep = []
    for cat, n in zip(cats, per):
        idx = torch.nonzero(data.categories == cat).flatten()
        keep.append(idx[torch.randperm(len(idx), generator=gen)[:n]])
    return data.subset(torch.sort(torch.cat(keep)).values)


class _PipelineDataset(Dataset):
    def __init__(self, data: ImageSet, pipeline: "AugmentationPipeline"):
        self.data = data
        self.pipeline = pipeline

    def __len__(self):
        return len(self.data)

    def __getitem__(self, i):
        return self.pipeline(self.data.images[i]), int(self.data.labels[i])


def make_loader(data: ImageSet, split_cfg, pipeline: "AugmentationPipeline", seed: int,
                deterministic: bool = True, batch_size: int | None = None) -> DataLoader:
    gen = torch.Generator().manual_seed(seed)
    return DataLoader(
        _PipelineDataset(data, pipeline),
        batch_size=batch_size or split_cfg.batch_size,
        shuffle=split_cfg.shuffle,
        num_workers=0 if deterministic else split_cfg.num_workers,
        generator=gen,
    )


def load_dataset(name: str, split: str, config: ExperimentConfig,
                 root: str | os.PathLike | None = None, download: bool = False,
                 cap: int | None = None) -> DataLoader:
    """Batches of ``(images, labels)`` for one split with that split's transforms."""
    data = get_split(name, split, config, root, download, cap)
    split_cfg = config.splits[split]
    return make_loader(data, split_cfg, build_pipeline(split_cfg.transforms), config.seed,
                       config.deterministic)


# ---------------------------------------------------------------------------
# augmentation


def _to_float(img):
    if isinstance(img, np.ndarray):
        img = torch.from_numpy(img)
        if img.ndim == 3 and img.shape[-1] in (1, 3) and img.shape[0] not in (1, 3):
            img = img.permute(2, 0, 1)
    if img.dtype == torch.uint8:
        return img.to(torch.float32) / 255.0
    return img.to(torch.float32)


class ToTensor:
    def __call__(self, img):
        return _to_float(img)

    def __repr__(self):
        return "ToTensor()"


class Normalize:
    def __init__(self, mean, std):
        self.mean = torch.tensor([float(m) for m in mean]).view(-1, 1, 1)
        self.std = torch.tensor([float(s) for s in std]).view(-1, 1, 1)

    def __call__(self, img):
        img = _to_float(img)
        if img.shape[-3] != self.mean.shape[0]:
            raise ValueError(f"Normalize has {self.mean.shape[0]} channels, image has {img.shape[-3]}")
        return (img - self.mean) / self.std

    def __repr__(self):
        return f"Normalize(mean={self.mean.flatten().tolist()}, std={self.std.flatten().tolist()})"


class CutOut:
    """Zero one ``size`` x ``size`` square at a random centre (clipped at borders)."""

    def __init__(self, size: int):
        self.size = size

    def __call__(self, img):
        img = img.clone() if isinstance(img, torch.Tensor) else torch.as_tensor(img).clone()
        h, w = img.shape[-2:]
        cy = int(torch.randint(h, (1,)))
        cx = int(torch.randint(w, (1,)))
        y0, y1 = max(cy - self.size // 2, 0), min(cy + (self.size + 1) // 2, h)
        x0, x1 = max(cx - self.size // 2, 0), min(cx + (self.size + 1) // 2, w)
        img[..., y0:y1, x0:x1] = 0
        return img

    def __repr__(self):
        return f"CutOut(size={self.size})"


def _check(cond, msg):
    if not cond:
        raise ConfigError(msg)


def _compile(spec: TransformSpec):
    p = dict(spec.params)
    kind = spec.kind
    if kind == "ToTensor":
        return ToTensor()
    if kind == "Normalize":
        _check(all(float(s) > 0 for s in p["std"]), f"Normalize std must be > 0, got {p['std']}")
        return Normalize(p["mean"], p["std"])
    if kind == "RandomCrop":
        _check("size" in p and int(p["size"]) > 0, "RandomCrop needs a positive size")
        _check(int(p.get("padding", 0)) >= 0, "RandomCrop padding must be >= 0")
        return v2.RandomCrop(int(p["size"]), padding=int(p.get("padding", 0)) or None)
    if kind == "RandomHorizontalFlip":
        prob = float(p.get("p", 0.5))
        _check(0 <= prob <= 1, f"RandomHorizontalFlip p must lie in [0, 1], got {prob}")
        return v2.RandomHorizontalFlip(prob)
    if kind == "RandomRotation":
        _check("degrees" in p and float(p["degrees"]) >= 0, "RandomRotation needs degrees >= 0")
        return v2.RandomRotation(float(p["degrees"]))
    if kind == "ColorJitter":
        vals = {k: float(p.get(k, 0.0)) for k in ("brightness", "contrast", "saturation", "hue")}
        _check(all(v >= 0 for v in vals.values()) and vals["hue"] <= 0.5,
               f"ColorJitter params out of range: {vals}")
        return v2.ColorJitter(**{k: v or None for k, v in vals.items()})
    if kind == "RandAugment":
        num_ops = int(p.get("num_ops", 2))
        magnitude = int(p.get("magnitude", 9))
        _check(num_ops >= 0 and 0 <= magnitude <= 30, f"RandAugment params out of range: {p}")
        return v2.RandAugment(num_ops=num_ops, magnitude=magnitude)
    if kind == "CutOut":
        size = int(p.get("size", 16))
        _check(size > 0, f"CutOut size must be > 0, got {size}")
        return CutOut(size)
    raise ConfigError(f"unknown transform kind {kind!r}")  # pragma: no cover


class AugmentationPipeline:
    """Ordered transforms; the output is always a float tensor.

    Stochastic steps draw from torch's global generator, so ``seed_all``
    controls them.
    """

    def __init__(self, specs, steps):
        self.specs = list(specs)
        self.steps = list(steps)

    @property
    def kinds(self) -> list[str]:
        return [s.kind for s in self.specs]

    def describe(self) -> list[dict]:
        return [{"kind": s.kind, "params": dict(s.params)} for s in self.specs]

    def __call__(self, img):
        if isinstance(img, np.ndarray):
            img = _to_float(img) if img.dtype != np.uint8 else torch.from_numpy(img)
        for step in self.steps:
            img = step(img)
        return _to_float(img)

    def __repr__(self):
        return f"AugmentationPipeline({self.steps})"


def build_pipeline(specs) -> AugmentationPipeline:
    specs = [s if isinstance(s, TransformSpec) else TransformSpec(s["type"], s.get("params", {}))
             for s in specs]
    return AugmentationPipeline(specs, [_compile(s) for s in specs])


# ---------------------------------------------------------------------------
# statistics and relabelling


def compute_normalization_stats(data, config: ExperimentConfig | None = None,
                                root: str | os.PathLike | None = None,
                                download: bool = False) -> tuple[list[float], list[float]]:
    """Per-channel mean and (population) std of the full training archive in [0, 1].

    ``data`` is a dataset name or an :class:`ImageSet`.
    """
    if isinstance(data, str):
        data = load_raw(data, True, config, root, download)
    if len(data) == 0:
        raise ValueError("cannot compute normalization statistics of an empty dataset")
    channels = data.images.shape[1]
    total = torch.zeros(channels, dtype=torch.float64)
    total_sq = torch.zeros(channels, dtype=torch.float64)
    count = 0
    for start in range(0, len(data), 4096):
        chunk = _to_float(data.images[start:start + 4096]).to(torch.float64)
        total += chunk.sum(dim=(0, 2, 3))
        total_sq += (chunk**2).sum(dim=(0, 2, 3))
        count += chunk.shape[0] * chunk.shape[2] * chunk.shape[3]
    mean = total / count
    var = torch.clamp(total_sq / count - mean**2, min=0.0)
    std = torch.sqrt(var)
    if torch.any(std == 0):
        warnings.warn("degenerate std: at least one channel is constant", RuntimeWarning, stacklevel=2)
    return mean.tolist(), std.tolist()


def restrict_and_relabel(data: ImageSet, category_subset, group_map: dict) -> ImageSet:
    """Keep images of ``category_subset``; label each with ``group_map[category]``."""
    subset = sorted(set(int(c) for c in category_subset))
    if not subset:
        raise ValueError("category subset is empty")
    missing = [c for c in subset if c not in group_map]
    if missing:
        raise ValueError(f"group_map has no entry for categories {missing}")
    groups = sorted({group_map[c] for c in subset})
    if groups != list(range(len(groups))):
        raise ValueError(f"group indices must be contiguous from 0, got {groups}")
    mask = torch.isin(data.categories, torch.tensor(subset))
    idx = torch.nonzero(mask).flatten()
    out = data.subset(idx)
    out.labels = torch.tensor([group_map[c] for c in out.categories.tolist()], dtype=torch.long)
    return out


def dataset_checksum(name: str, config: ExperimentConfig | None = None,
                     root: str | os.PathLike | None = None) -> str:
    """Content hash of the raw archives, or of the generator parameters for synthetic data."""
    if name == "synthetic":
        if config is None or config.synthetic is None:
            return "unavailable"
        payload = json.dumps({"spec": asdict(config.synthetic), "seed": config.seed}, sort_keys=True)
        return "sha256:" + hashlib.sha256(payload.encode()).hexdigest()
    directory = data_root(root) / _RAW_DIRS.get(name, name)
    files = sorted(p for p in directory.glob(_RAW_GLOBS.get(name, "*")) if p.is_file())
    if not files:
        return "unavailable"
    h = hashlib.sha256()
    for path in files:
        h.update(path.name.encode())
        with open(path, "rb") as fh:
            for chunk in iter(lambda: fh.read(1 << 20), b""):
                h.update(chunk)
    return "sha256:" + h.hexdigest()
