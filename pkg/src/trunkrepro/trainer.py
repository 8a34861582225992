"""Per-node training and recursive tree construction.

Each internal node is trained in two phases.  The *discover* phase trains a
K-way classifier over the node's categories; its validation softmax gives the
similarity matrix that GV-grouping turns into supergroups.  When the grouping
is a proper coarsening (between 1 and K groups exclusive), the *route* phase
puts a fresh head with one output per group on the network and retrains it on
group labels.  A grouping that does not refine (one group) or that is already
all singletons keeps the discover network, which then routes straight to
leaves.

Build directory layout::

    config.yaml               effective config
    manifest.json             run manifest (written before training)
    build.json                BuildReport (status, reports, digest, device, caps)
    tree.json                 the built tree (written on success)
    nodes/<id>/weights.pt     routing network of node <id>
    nodes/<id>/weights.json   its architecture
    nodes/<id>/report.json    NodeTrainReport plus grouping and similarity
"""

from __future__ import annotations

import copy
import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F

from . import provenance
from .config import (ExperimentConfig, TrainSpec, config_diff, config_digest, load_config,
                     save_config, seed_all)
from .datakit import (AugmentationPipeline, ImageSet, build_pipeline, dataset_handle, get_split,
                      restrict_and_relabel)
from .model import BackboneSpec, NodeNetwork, load_network, make_node_network, node_seed, save_network
from .sim import SimilarityMatrix, compute_similarity, group_categories
from .tree import Trunk, save_tree, tree_from_groupings, validate

log = logging.getLogger("trunkrepro.trainer")

DEBUG_CAPS = {"train": 512, "validation": 128, "test": 256}


class TrainingError(RuntimeError):
    """A node failed to train; ``partial`` holds whatever was built so far."""

    def __init__(self, message: str, partial: dict | None = None):
        super().__init__(message)
        self.partial = partial or {}


class ResumeRefused(RuntimeError):
    pass


@dataclass
class NodeTrainReport:
    node_id: str
    epochs_run: int
    final_train_loss: float
    val_accuracy: float
    wall_time: float
    checkpoint: str | None = None
    phase: str = "discover"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class NodeData:
    """Train and validation images of one node, labelled with node-local targets."""

    train: ImageSet
    validation: ImageSet
    train_pipeline: AugmentationPipeline
    eval_pipeline: AugmentationPipeline
    batch_size: int
    val_batch_size: int
    shuffle: bool = True


@dataclass
class BuildReport:
    tree: Trunk | None
    node_reports: list
    config_digest: str
    seed: int
    total_wall_time: float
    device: str = "cpu"
    status: str = "complete"
    debug_caps: dict | None = None
    manifest: str = provenance.MANIFEST_NAME
    build_dir: str | None = None

    def to_dict(self) -> dict:
        return {
            "status": self.status,
            "config_digest": self.config_digest,
            "seed": self.seed,
            "total_wall_time": self.total_wall_time,
            "device": self.device,
            "debug_caps": self.debug_caps,
            "manifest": self.manifest,
            "node_reports": [r.to_dict() for r in self.node_reports],
            "tree": "tree.json" if self.tree is not None else None,
        }


def _log(msg: str, **fields) -> None:
    """Stable ``trunk key=value ...`` lines."""
    parts = " ".join(f"{k}={v}" for k, v in fields.items())
    log.info("trunk %s %s", msg, parts)


# ---------------------------------------------------------------------------
# single node


def _loss_fn(spec: TrainSpec):
    if spec.loss == "NLLLoss":
        return lambda net, x, y: F.nll_loss(net.log_proba(x), y)
    return lambda net, x, y: F.cross_entropy(net.logits(x), y)


@torch.no_grad()
def _accuracy(network: NodeNetwork, loader) -> float:
    network.eval()
    correct = total = 0
    for x, y in loader:
        pred = network.logits(x).argmax(dim=1)
        correct += int((pred == y).sum())
        total += int(y.numel())
    return correct / total if total else 0.0


def train_node(network: NodeNetwork, node_data: NodeData, spec: TrainSpec, *, seed: int = 0,
               node_id: str = "0", checkpoint_dir: str | os.PathLike | None = None,
               phase: str = "discover") -> NodeTrainReport:
    """Optimise ``network`` on ``node_data``; the best-validation parameters are kept."""
    start = time.perf_counter()
    k = network.out_groups
    if k == 1:
        ckpt = str(save_network(network, checkpoint_dir)) if checkpoint_dir else None
        return NodeTrainReport(node_id, 0, 0.0, 1.0, time.perf_counter() - start, ckpt, phase)
    present = set(node_data.train.labels.tolist())
    empty = sorted(set(range(k)) - present)
    if empty:
        raise TrainingError(f"node {node_id}: no training images for group(s) {empty}")
    if len(node_data.validation) == 0:
        raise TrainingError(f"node {node_id}: empty validation set")

    torch.manual_seed(seed)
    train_loader = torch.utils.data.DataLoader(
        _Pipelined(node_data.train, node_data.train_pipeline),
        batch_size=node_data.batch_size, shuffle=node_data.shuffle,
        generator=torch.Generator().manual_seed(seed))
    val_loader = torch.utils.data.DataLoader(
        _Pipelined(node_data.validation, node_data.eval_pipeline),
        batch_size=node_data.val_batch_size, shuffle=False)

    optimizer = getattr(torch.optim, spec.optimizer.type)(network.parameters(), **spec.optimizer.params)
    scheduler = getattr(torch.optim.lr_scheduler, spec.lr_scheduler.type)(
        optimizer, **spec.lr_scheduler.params)
    loss_fn = _loss_fn(spec)

    best_acc, best_state = -1.0, None
    final_loss = float("nan")
    for epoch in range(1, spec.epochs + 1):
        network.train()
        total, count = 0.0, 0
        for x, y in train_loader:
            optimizer.zero_grad()
            loss = loss_fn(network, x, y)
            if not torch.isfinite(loss):
                lr = optimizer.param_groups[0]["lr"]
                raise TrainingError(
                    f"node {node_id}: non-finite loss {loss.item()} at epoch {epoch} (lr={lr:g})")
            loss.backward()
            optimizer.step()
            total += loss.item() * y.numel()
            count += y.numel()
        final_loss = total / count
        lr = optimizer.param_groups[0]["lr"]
        scheduler.step()
        acc = _accuracy(network, val_loader)
        _log("epoch", node=node_id, phase=phase, epoch=f"{epoch}/{spec.epochs}",
             loss=f"{final_loss:.6f}", val_acc=f"{acc:.4f}", lr=f"{lr:.6g}")
        if acc > best_acc:
            best_acc, best_state = acc, copy.deepcopy(network.state_dict())
    network.load_state_dict(best_state)
    network.eval()
    ckpt = str(save_network(network, checkpoint_dir)) if checkpoint_dir else None
    return NodeTrainReport(node_id, spec.epochs, final_loss, best_acc,
                           time.perf_counter() - start, ckpt, phase)


class _Pipelined(torch.utils.data.Dataset):
    def __init__(self, data: ImageSet, pipeline):
        self.data, self.pipeline = data, pipeline

    def __len__(self):
        return len(self.data)

    def __getitem__(self, i):
        return self.pipeline(self.data.images[i]), int(self.data.labels[i])


# ---------------------------------------------------------------------------
# whole tree


def device_identity() -> str:
    return provenance._accelerator() if torch.cuda.is_available() else f"cpu:{provenance._cpu_model()}"


def _require_ready(config: ExperimentConfig):
    if config.dataset is None:
        raise ValueError("config names no dataset; set dataset.name or pass --dataset")
    if config.model_backbone is None:
        raise ValueError("config names no model backbone; set model_backbone or pass --model_backbone")


class _Builder:
    def __init__(self, config: ExperimentConfig, build_dir: Path, caps: dict | None,
                 root=None, download=False):
        self.config = config
        self.dir = build_dir
        self.caps = caps
        handle = dataset_handle(config.dataset, config)
        self.handle = handle
        self.spec = BackboneSpec.load(config.model_backbone, handle.image_shape)
        cap = caps or {}
        self.train = get_split(config.dataset, "train", config, root, download, cap.get("train"))
        self.val = get_split(config.dataset, "validation", config, root, download, cap.get("validation"))
        self.train_pipeline = build_pipeline(config.splits["train"].transforms)
        self.eval_pipeline = build_pipeline(config.splits["validation"].transforms)
        self.reports: list[NodeTrainReport] = []
        self.groupings: dict[tuple, tuple] = {}
        self.max_depth = handle.num_categories

    def node_dir(self, node_id: str) -> Path:
        return self.dir / "nodes" / node_id

    def node_data(self, cats, group_map) -> NodeData:
        cfg = self.config.splits
        return NodeData(
            restrict_and_relabel(self.train, cats, group_map),
            restrict_and_relabel(self.val, cats, group_map),
            self.train_pipeline, self.eval_pipeline,
            cfg["train"].batch_size, cfg["validation"].batch_size, cfg["train"].shuffle)

    def completed(self, node_id: str) -> dict | None:
        path = self.node_dir(node_id) / "report.json"
        if path.exists():
            record = json.loads(path.read_text())
            if record.get("complete"):
                return record
        return None

    def build_node(self, node_id: str, cats: tuple, depth: int):
        if depth > self.max_depth:
            raise TrainingError(f"internal error: recursion depth {depth} exceeds category count")
        if len(cats) == 1:
            return
        record = self.completed(node_id)
        if record is not None:
            _log("resume-skip", node=node_id)
            grouping = tuple(tuple(g) for g in record["grouping"])
            self.reports.append(NodeTrainReport(**record["report"]))
        else:
            grouping = self.train_node(node_id, cats)
        self.groupings[cats] = grouping
        for i, group in enumerate(grouping):
            if len(group) > 1:
                self.build_node(f"{node_id}.{i}", group, depth + 1)

    def train_node(self, node_id: str, cats: tuple) -> tuple:
        tr = self.config.training
        seed = node_seed(self.config.seed, node_id)
        out = self.node_dir(node_id)
        k = len(cats)
        net = make_node_network(self.spec, k, seed, tr.batch_norm_mode)
        data = self.node_data(cats, {c: i for i, c in enumerate(cats)})
        discover = train_node(net, data, tr, seed=seed, node_id=node_id, phase="discover")
        val_loader = torch.utils.data.DataLoader(_Pipelined(data.validation, self.eval_pipeline),
                                                 batch_size=data.val_batch_size, shuffle=False)
        sim = compute_similarity(net, val_loader, list(range(k)))
        local = group_categories(sim, tr.grouping_volatility)
        groups = tuple(tuple(cats[i] for i in g) for g in local.partition)
        _log("grouping", node=node_id, gv=tr.grouping_volatility,
             groups=json.dumps([list(g) for g in groups], separators=(",", ":")))
        if 1 < len(groups) < k:
            group_map = {c: gi for gi, g in enumerate(groups) for c in g}
            net.replace_head(len(groups), torch.Generator().manual_seed(seed + 1))
            report = train_node(net, self.node_data(cats, group_map), tr, seed=seed + 1,
                                node_id=node_id, checkpoint_dir=out, phase="route")
        else:
            groups = tuple((c,) for c in cats)
            save_network(net, out)
            report = dataclasses.replace(discover, checkpoint=str(out / "weights.pt"))
        (out / "similarity.csv").write_text(
            SimilarityMatrix(sim.entries, tuple(cats)).to_csv())
        record = {"complete": True, "node_id": node_id, "categories": list(cats),
                  "grouping": [list(g) for g in groups], "report": report.to_dict(),
                  "discover": discover.to_dict()}
        (out / "report.json").write_text(json.dumps(record, indent=2) + "\n")
        self.reports.append(report)
        return groups

    def tree(self) -> Trunk:
        cats = tuple(range(self.handle.num_categories))
        tree = tree_from_groupings(self.config.dataset, self.config.grouping_volatility,
                                   self.groupings, cats, self.handle.category_names,
                                   f"trunkrepro {provenance._artifact_version()}")
        nodes = {nid: dataclasses.replace(n, weights_ref=f"nodes/{nid}" if n.children else None)
                 for nid, n in tree.nodes.items()}
        return dataclasses.replace(tree, nodes=nodes)


def _write_build(report: BuildReport, build_dir: Path) -> None:
    (build_dir / "build.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")


def build_and_train(config: ExperimentConfig, build_dir: str | os.PathLike | None = None, *,
                    debug: bool = False, caps: dict | None = None, root=None,
                    download: bool = False) -> BuildReport:
    """Train the root, group, recurse into every multi-category group."""
    _require_ready(config)
    build_dir = Path(build_dir or Path(config.output_dir) / config.dataset)
    build_dir.mkdir(parents=True, exist_ok=True)
    if caps is None and debug:
        caps = dict(DEBUG_CAPS)
    stored = build_dir / "config.yaml"
    if stored.exists():
        previous = load_config(stored)
        if config_digest(previous) != config_digest(config):
            raise ResumeRefused(
                f"{build_dir} holds a build with a different config; differing keys: "
                + ", ".join(config_diff(previous, config)))
    else:
        save_config(config, stored)
    provenance.save_manifest(provenance.capture(config, root), build_dir)
    caps_file = build_dir / "caps.json"
    if caps_file.exists():
        caps = json.loads(caps_file.read_text()) or None
    else:
        caps_file.write_text(json.dumps(caps) + "\n")
    return _run(config, build_dir, caps, root, download)


def _run(config, build_dir: Path, caps, root, download) -> BuildReport:
    seed_all(config.seed, config.deterministic)
    start = time.perf_counter()
    builder = _Builder(config, build_dir, caps, root, download)
    _log("build-start", dataset=config.dataset, seed=config.seed, gv=config.grouping_volatility,
         dir=build_dir)
    digest = config_digest(config)
    try:
        builder.build_node("0", tuple(range(builder.handle.num_categories)), 0)
    except Exception as exc:
        partial = {"groupings": {",".join(map(str, k)): [list(g) for g in v]
                                 for k, v in builder.groupings.items()},
                   "node_reports": [r.to_dict() for r in builder.reports]}
        failed = BuildReport(None, builder.reports, digest, config.seed,
                             time.perf_counter() - start, device_identity(), "failed", caps,
                             build_dir=str(build_dir))
        body = failed.to_dict()
        body["error"] = str(exc)
        body["partial"] = partial
        (build_dir / "build.json").write_text(json.dumps(body, indent=2) + "\n")
        if isinstance(exc, TrainingError):
            exc.partial = partial
            raise
        raise TrainingError(f"build failed: {exc}", partial) from exc
    tree = builder.tree()
    problems = validate(tree)
    if problems:
        raise TrainingError("built tree is invalid: " + "; ".join(map(str, problems)))
    save_tree(tree, build_dir / "tree.json")
    reports = sorted(builder.reports, key=lambda r: [int(p) for p in r.node_id.split(".")])
    report = BuildReport(tree, reports, digest, config.seed, time.perf_counter() - start,
                         device_identity(), "complete", caps, build_dir=str(build_dir))
    _write_build(report, build_dir)
    _log("build-done", leaves=len(tree.leaves()), depth=tree.depth, seconds=f"{report.total_wall_time:.2f}")
    return report


def resume(build_dir: str | os.PathLike, config: ExperimentConfig | None = None, *,
           root=None, download: bool = False) -> BuildReport:
    """Continue an interrupted build; nodes with a completion record are not retrained."""
    build_dir = Path(build_dir)
    stored_path = build_dir / "config.yaml"
    if not stored_path.exists():
        raise FileNotFoundError(f"no build to resume in {build_dir}")
    stored = load_config(stored_path)
    if config is not None and config_digest(config) != config_digest(stored):
        raise ResumeRefused("config digest differs from the stored build; differing keys: "
                            + ", ".join(config_diff(stored, config)))
    caps_file = build_dir / "caps.json"
    caps = json.loads(caps_file.read_text()) if caps_file.exists() else None
    return _run(stored, build_dir, caps, root, download)


def load_build(build_dir: str | os.PathLike) -> BuildReport:
    from .tree import load_tree

    build_dir = Path(build_dir)
    raw = json.loads((build_dir / "build.json").read_text())
    tree = load_tree(build_dir / "tree.json") if raw.get("tree") else None
    return BuildReport(tree, [NodeTrainReport(**r) for r in raw["node_reports"]],
                       raw["config_digest"], raw["seed"], raw["total_wall_time"], raw["device"],
                       raw["status"], raw.get("debug_caps"), raw.get("manifest", provenance.MANIFEST_NAME),
                       str(build_dir))


def train_fixed_tree(config: ExperimentConfig, tree: Trunk, build_dir: str | os.PathLike, *,
                     caps: dict | None = None, root=None, download: bool = False) -> BuildReport:
    """Train routing networks for a given structure (no grouping discovery)."""
    _require_ready(config)
    build_dir = Path(build_dir)
    build_dir.mkdir(parents=True, exist_ok=True)
    save_config(config, build_dir / "config.yaml")
    provenance.save_manifest(provenance.capture(config, root), build_dir)
    seed_all(config.seed, config.deterministic)
    start = time.perf_counter()
    builder = _Builder(config, build_dir, caps, root, download)
    reports = []
    nodes = {}
    for node in sorted(tree.internal_nodes(), key=lambda n: [int(p) for p in n.id.split(".")]
                       if all(p.isdigit() for p in n.id.split(".")) else [n.id]):
        seed = node_seed(config.seed, node.id)
        group_map = {c: gi for gi, g in enumerate(node.grouping) for c in g}
        net = make_node_network(builder.spec, len(node.grouping), seed,
                                config.training.batch_norm_mode)
        out = builder.node_dir(node.id)
        report = train_node(net, builder.node_data(node.categories, group_map), config.training,
                            seed=seed, node_id=node.id, checkpoint_dir=out, phase="route")
        (out / "report.json").write_text(json.dumps(
            {"complete": True, "node_id": node.id, "categories": list(node.categories),
             "grouping": [list(g) for g in node.grouping], "report": report.to_dict()}, indent=2) + "\n")
        reports.append(report)
        nodes[node.id] = dataclasses.replace(node, weights_ref=f"nodes/{node.id}")
    for node in tree.leaves():
        nodes[node.id] = node
    fixed = dataclasses.replace(tree, nodes=nodes)
    save_tree(fixed, build_dir / "tree.json")
    report = BuildReport(fixed, reports, config_digest(config), config.seed,
                         time.perf_counter() - start, device_identity(), "complete", caps,
                         build_dir=str(build_dir))
    _write_build(report, build_dir)
    return report


def load_node_networks(tree: Trunk, build_dir: str | os.PathLike) -> dict[str, NodeNetwork]:
    """Routing networks of every internal node; a missing checkpoint names its node."""
    build_dir = Path(build_dir)
    nets = {}
    for node in tree.internal_nodes():
        ref = build_dir / (node.weights_ref or f"nodes/{node.id}")
        try:
            nets[node.id] = load_network(ref)
        except FileNotFoundError as exc:
            raise FileNotFoundError(f"missing checkpoint for node {node.id} at {ref}") from exc
    return nets
