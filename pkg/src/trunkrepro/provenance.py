"""Run manifests: who ran what, where, with which software and data."""

from __future__ import annotations

import json
import os
import platform
import sys
from dataclasses import asdict, dataclass, fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig, config_digest

UNAVAILABLE = "unavailable"
MANIFEST_NAME = "manifest.json"


def _artifact_version() -> str:
    try:
        from importlib.metadata import version

        return version("artifact")
    except Exception:
        return UNAVAILABLE


def _cpu_model() -> str:
    try:
        with open("/proc/cpuinfo") as fh:
            for line in fh:
                if line.startswith("model name"):
                    return line.split(":", 1)[1].strip()
    except OSError:
        pass
    return platform.processor() or UNAVAILABLE


def _accelerator() -> str:
    if torch.cuda.is_available():
        return ", ".join(torch.cuda.get_device_name(i) for i in range(torch.cuda.device_count()))
    return "none"


def _runtime_versions() -> dict:
    versions = {
        "python": platform.python_version(),
        "torch": torch.__version__,
        "numpy": np.__version__,
        "cuda": torch.version.cuda or UNAVAILABLE,
        "cudnn": str(torch.backends.cudnn.version()) if torch.backends.cudnn.is_available() else UNAVAILABLE,
    }
    try:
        import torchvision

        versions["torchvision"] = torchvision.__version__
    except ImportError:
        versions["torchvision"] = UNAVAILABLE
    return versions


@dataclass(frozen=True)
class RunManifest:
    timestamp: str
    device: str
    accelerator: str
    platform: str
    runtime_versions: dict
    seed: int
    deterministic_mode: bool
    config_digest: str
    dataset_checksums: dict
    artifact_version: str

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunManifest":
        names = {f.name for f in fields(cls)}
        return cls(**{k: raw.get(k, UNAVAILABLE) for k in names})


def capture(config: ExperimentConfig, root: str | os.PathLike | None = None) -> RunManifest:
    from .datakit import dataset_checksum

    checksums = {}
    if config.dataset:
        try:
            checksums[config.dataset] = dataset_checksum(config.dataset, config, root)
        except Exception:
            checksums[config.dataset] = UNAVAILABLE
    return RunManifest(
        timestamp=datetime.now(timezone.utc).isoformat(timespec="seconds"),
        device=_cpu_model(),
        accelerator=_accelerator(),
        platform=f"{platform.system()} {platform.release()} {platform.machine()}".strip() or UNAVAILABLE,
        runtime_versions=_runtime_versions(),
        seed=config.seed,
        deterministic_mode=config.deterministic,
        config_digest=config_digest(config),
        dataset_checksums=checksums,
        artifact_version=_artifact_version(),
    )


def diff(a: RunManifest, b: RunManifest) -> list[str]:
    """Names of fields that differ, timestamp excluded, in declaration order."""
    return [f.name for f in fields(RunManifest)
            if f.name != "timestamp" and getattr(a, f.name) != getattr(b, f.name)]


def save_manifest(manifest: RunManifest, directory: str | os.PathLike) -> Path:
    """Write ``manifest.json``; an existing manifest is never overwritten."""
    path = Path(directory) / MANIFEST_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.exists():
        return path
    path.write_text(json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def load_manifest(path: str | os.PathLike) -> RunManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    return RunManifest.from_dict(json.loads(path.read_text()))


def append_addendum(directory: str | os.PathLike, note: dict) -> None:
    """Later facts about a run go into an append-only side file."""
    with open(Path(directory) / "manifest.addenda.jsonl", "a") as fh:
        fh.write(json.dumps(note, sort_keys=True) + "\n")


def python_executable() -> str:
    return sys.executable or UNAVAILABLE
