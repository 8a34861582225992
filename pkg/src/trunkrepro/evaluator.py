"""Hierarchical inference, accuracy/time/FLOPs metrics, and checking
published accuracy claims against measured ones.

Routing takes the argmax of each node's output; ties go to the lowest group
index (``torch.argmax`` semantics).  Leaves carry no weights, so the number of
forward passes for an image equals the number of internal nodes on its path.
"""

from __future__ import annotations

import csv
import io
import json
import os
import time
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .config import ExperimentConfig
from .datakit import ImageSet, build_pipeline, dataset_handle
from .model import count_flops
from .tree import Trunk, load_tree

CSV_FIELDS = ("accuracy", "total_time", "load_time", "mean_flops_per_image", "n_images")


@dataclass
class EvalResult:
    accuracy: float
    total_time: float
    mean_flops_per_image: float
    per_category_accuracy: dict
    path_length_histogram: dict
    n_images: int = 0
    n_correct: int = 0
    load_time: float = 0.0
    per_category_correct: dict = field(default_factory=dict)
    per_category_total: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "EvalResult":
        raw = dict(raw)
        for key in ("per_category_accuracy", "per_category_correct", "per_category_total",
                    "path_length_histogram"):
            raw[key] = {int(k): v for k, v in raw.get(key, {}).items()}
        return cls(**raw)

    def csv_row(self) -> str:
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerow([getattr(self, f) for f in CSV_FIELDS])
        return buf.getvalue()


def save_result(result: EvalResult, path: str | os.PathLike) -> None:
    Path(path).write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True) + "\n")


def load_result(path: str | os.PathLike) -> EvalResult:
    return EvalResult.from_dict(json.loads(Path(path).read_text()))


def _child_for(node, group_index: int) -> str:
    return node.children[group_index]


def _require_networks(tree: Trunk, networks: dict):
    for node in tree.internal_nodes():
        if node.id not in networks:
            raise FileNotFoundError(f"missing checkpoint for node {node.id}")


@torch.no_grad()
def infer_image(tree: Trunk, image: torch.Tensor, networks: dict) -> tuple:
    """Route one preprocessed ``(C, H, W)`` image; returns ``(category, path)``."""
    node = tree.root
    path = [node.id]
    while node.children:
        net = networks.get(node.id)
        if net is None:
            raise FileNotFoundError(f"missing checkpoint for node {node.id}")
        net.eval()
        group = int(torch.argmax(net(image.unsqueeze(0))[0]))
        node = tree.nodes[_child_for(node, group)]
        path.append(node.id)
    return node.categories[0], path


@torch.no_grad()
def route_batch(tree: Trunk, images: torch.Tensor, networks: dict) -> tuple[list, list]:
    """Batch routing: each node sees only the images currently sitting at it."""
    n = images.shape[0]
    preds = [None] * n
    paths = [[tree.root_id] for _ in range(n)]
    frontier = [(tree.root_id, torch.arange(n))]
    while frontier:
        nid, idx = frontier.pop()
        node = tree.nodes[nid]
        if not node.children:
            for i in idx.tolist():
                preds[i] = node.categories[0]
            continue
        net = networks.get(nid)
        if net is None:
            raise FileNotFoundError(f"missing checkpoint for node {nid}")
        net.eval()
        groups = torch.argmax(net(images[idx]), dim=1)
        for g in range(len(node.children)):
            sub = idx[groups == g]
            if sub.numel():
                child = node.children[g]
                for i in sub.tolist():
                    paths[i].append(child)
                frontier.append((child, sub))
    return preds, paths


def node_flops(tree: Trunk, networks: dict, input_shape) -> dict:
    return {node.id: count_flops(networks[node.id], input_shape) for node in tree.internal_nodes()}


def evaluate(tree: Trunk, test_data: ImageSet, config: ExperimentConfig, networks: dict,
             batch_size: int | None = None) -> EvalResult:
    """Accuracy, routing time and per-image FLOPs over the whole of ``test_data``."""
    _require_networks(tree, networks)
    input_shape = tuple(test_data.images.shape[1:])
    flops = node_flops(tree, networks, input_shape)
    pipeline = build_pipeline(config.splits["test"].transforms)
    batch_size = batch_size or max(config.splits["test"].batch_size, 1)
    torch.set_num_threads(1)  # single-threaded timing for stability

    correct_by_cat: Counter = Counter()
    total_by_cat: Counter = Counter()
    hist: Counter = Counter()
    total_flops = 0
    route_time = load_time = 0.0
    for start in range(0, len(test_data), batch_size):
        t0 = time.perf_counter()
        raw = test_data.images[start:start + batch_size]
        batch = torch.stack([pipeline(img) for img in raw])
        cats = test_data.categories[start:start + batch_size].tolist()
        t1 = time.perf_counter()
        preds, paths = route_batch(tree, batch, networks)
        route_time += time.perf_counter() - t1
        load_time += t1 - t0
        for pred, path, cat in zip(preds, paths, cats):
            total_by_cat[cat] += 1
            correct_by_cat[cat] += int(pred == cat)
            hist[len(path)] += 1
            total_flops += sum(flops[nid] for nid in path if nid in flops)
    n = len(test_data)
    n_correct = sum(correct_by_cat.values())
    return EvalResult(
        accuracy=n_correct / n if n else 0.0,
        total_time=route_time,
        mean_flops_per_image=total_flops / n if n else 0.0,
        per_category_accuracy={c: correct_by_cat[c] / total_by_cat[c] for c in sorted(total_by_cat)},
        path_length_histogram=dict(sorted(hist.items())),
        n_images=n,
        n_correct=n_correct,
        load_time=load_time,
        per_category_correct={c: correct_by_cat[c] for c in sorted(total_by_cat)},
        per_category_total={c: total_by_cat[c] for c in sorted(total_by_cat)},
    )


def evaluate_build(build_dir: str | os.PathLike, config: ExperimentConfig | None = None, *,
                   cap: int | None = None, root=None, download: bool = False) -> EvalResult:
    """Evaluate a build directory on its dataset's test split; writes eval.json."""
    from .config import load_config
    from .datakit import get_split
    from .trainer import load_node_networks

    build_dir = Path(build_dir)
    tree_path = build_dir / "tree.json"
    if not tree_path.exists():
        raise FileNotFoundError(f"no tree found in {build_dir}")
    tree = load_tree(tree_path)
    config = config or load_config(build_dir / "config.yaml")
    networks = load_node_networks(tree, build_dir)
    test = get_split(config.dataset, "test", config, root, download, cap)
    result = evaluate(tree, test, config, networks)
    save_result(result, build_dir / "eval.json")
    return result


@dataclass
class VerificationReport:
    dataset: str
    measured_accuracy: float
    claimed_accuracy: float | None
    gap: float | None
    tolerance: float
    status: str  # "pass", "fail" or "unverifiable"

    def to_dict(self) -> dict:
        return asdict(self)


def load_claims(path: str | os.PathLike) -> dict:
    """Claims file: JSON ``{dataset, accuracy}`` or a list of those; accuracy is a fraction."""
    raw = json.loads(Path(path).read_text())
    entries = raw if isinstance(raw, list) else [raw]
    return {e["dataset"]: float(e["accuracy"]) for e in entries}


def verify_pretrained(weights_dir: str | os.PathLike, tree_file: str | os.PathLike,
                      config: ExperimentConfig, claims_file: str | os.PathLike | None = None,
                      tolerance: float = 0.001, *, cap: int | None = None, root=None,
                      download: bool = False, test_data: ImageSet | None = None) -> VerificationReport:
    """Measure accuracy of supplied weights and compare with the claimed value.

    ``tolerance`` is an absolute gap in accuracy fraction (0.001 = 0.1 points).
    """
    from .datakit import get_split
    from .trainer import load_node_networks

    tree = load_tree(tree_file)
    networks = load_node_networks(tree, weights_dir)
    if test_data is None:
        test_data = get_split(config.dataset, "test", config, root, download, cap)
    measured = evaluate(tree, test_data, config, networks).accuracy
    claimed = None
    if claims_file is not None and Path(claims_file).exists():
        claimed = load_claims(claims_file).get(config.dataset)
    if claimed is None:
        return VerificationReport(config.dataset, measured, None, None, tolerance, "unverifiable")
    gap = abs(measured - claimed)
    status = "pass" if gap <= tolerance + 1e-12 else "fail"
    return VerificationReport(config.dataset, measured, claimed, gap, tolerance, status)


def dataset_input_shape(config: ExperimentConfig) -> tuple:
    return tuple(dataset_handle(config.dataset, config).image_shape)
