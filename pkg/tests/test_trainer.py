import json

import pytest
import torch

from trunkrepro.config import TransformSpec
from trunkrepro.datakit import ImageSet, build_pipeline
from trunkrepro.model import BackboneSpec, make_node_network
from trunkrepro.trainer import (
    NodeData,
    ResumeRefused,
    TrainingError,
    build_and_train,
    load_build,
    load_node_networks,
    resume,
    train_node,
)
from trunkrepro.tree import fingerprint, load_tree

from conftest import desk_config

CAPS = {"train": 256, "validation": 64, "test": 64}


def small_config(**overrides):
    return desk_config(**{"training.epochs": 2, "training.lr_scheduler.params.T_max": 2, **overrides})


@pytest.fixture(scope="module")
def small_build(tmp_path_factory):
    config = small_config()
    build_dir = tmp_path_factory.mktemp("small") / "build"
    report = build_and_train(config, build_dir, caps=CAPS)
    return config, build_dir, report


def _stamps(build_dir):
    return {str(p.relative_to(build_dir)): p.stat().st_mtime_ns
            for p in (build_dir / "nodes").rglob("*") if p.is_file()}


def _blobs(n, offset, shape=(3, 8, 8)):
    gen = torch.Generator().manual_seed(0)
    half = n // 2
    base = torch.rand((n, *shape), generator=gen) * 0.2
    base[half:] += offset
    labels = torch.tensor([0] * half + [1] * (n - half))
    return ImageSet(base, labels, labels.clone())


def _node_data(train, val):
    pipe = build_pipeline([TransformSpec("ToTensor")])
    return NodeData(train, val, pipe, pipe, 16, 32)


def tiny_spec():
    blocks = ({"type": "conv", "out_channels": 4, "kernel": 3, "padding": 1}, {"type": "relu"},
              {"type": "gap"})
    return BackboneSpec("tiny", blocks, (3, 8, 8))


def test_separable_two_groups_learned():
    spec = small_config(**{"training.epochs": 8, "training.lr_scheduler.params.T_max": 8}).training
    net = make_node_network(tiny_spec(), 2, init_seed=0)
    report = train_node(net, _node_data(_blobs(256, 0.6), _blobs(64, 0.6)), spec, seed=1)
    assert report.val_accuracy >= 0.95
    assert report.epochs_run == 8


def test_single_group_node_is_trivial():
    net = make_node_network(tiny_spec(), 1, init_seed=0)
    report = train_node(net, _node_data(_blobs(8, 0.6), _blobs(8, 0.6)), small_config().training)
    assert report.val_accuracy == 1.0 and report.epochs_run == 0


def test_non_finite_loss_reports_epoch_and_lr():
    train = _blobs(32, 0.6)
    train.images[0] = float("nan")
    net = make_node_network(tiny_spec(), 2, init_seed=0)
    with pytest.raises(TrainingError, match=r"epoch 1 \(lr=0.005\)"):
        train_node(net, _node_data(train, _blobs(8, 0.6)), small_config().training)


def test_empty_group_rejected():
    train = _blobs(32, 0.6)
    train.labels[:] = 0
    net = make_node_network(tiny_spec(), 2, init_seed=0)
    with pytest.raises(TrainingError, match="no training images"):
        train_node(net, _node_data(train, _blobs(8, 0.6)), small_config().training)


def test_one_category_dataset_is_a_root_leaf(tmp_path):
    config = desk_config(**{"synthetic.supergroups": [], "synthetic.num_categories": 1})
    report = build_and_train(config, tmp_path / "b", caps=CAPS)
    assert list(report.tree.nodes) == ["0"]
    assert report.tree.depth == 0 and report.node_reports == []


def test_build_layout(small_build):
    config, build_dir, report = small_build
    assert report.status == "complete"
    for name in ("config.yaml", "manifest.json", "build.json", "tree.json", "caps.json"):
        assert (build_dir / name).exists(), name
    for node in report.tree.internal_nodes():
        d = build_dir / "nodes" / node.id
        assert (d / "weights.pt").exists() and (d / "similarity.csv").exists()
        assert json.loads((d / "report.json").read_text())["complete"]
    assert load_build(build_dir).tree == report.tree
    nets = load_node_networks(report.tree, build_dir)
    assert set(nets) == {n.id for n in report.tree.internal_nodes()}


def test_resume_of_finished_build_retrains_nothing(small_build):
    config, build_dir, report = small_build
    before = _stamps(build_dir)
    again = resume(build_dir)
    assert _stamps(build_dir) == before
    assert fingerprint(again.tree) == fingerprint(report.tree)


def test_resume_after_partial_build(tmp_path, small_build):
    config, reference_dir, reference = small_build
    build_dir = tmp_path / "b"
    build_and_train(config, build_dir, caps=CAPS)
    children = [n.id for n in reference.tree.internal_nodes() if n.id != "0"]
    if not children:
        pytest.skip("capped build produced a flat tree")
    victim = build_dir / "nodes" / children[-1]
    for p in victim.iterdir():
        p.unlink()
    (build_dir / "tree.json").unlink()
    root_before = (build_dir / "nodes" / "0" / "weights.pt").stat().st_mtime_ns
    report = resume(build_dir)
    assert (build_dir / "nodes" / "0" / "weights.pt").stat().st_mtime_ns == root_before
    assert fingerprint(report.tree) == fingerprint(reference.tree)
    redone = torch.load(victim / "weights.pt", weights_only=True)
    original = torch.load(reference_dir / "nodes" / children[-1] / "weights.pt", weights_only=True)
    assert all(torch.equal(redone[k], original[k]) for k in original)


def test_changed_config_refused(small_build):
    _, build_dir, _ = small_build
    with pytest.raises(ResumeRefused, match="grouping_volatility"):
        build_and_train(small_config(**{"training.grouping_volatility": 0.9}), build_dir, caps=CAPS)
    with pytest.raises(ResumeRefused):
        resume(build_dir, small_config(**{"training.grouping_volatility": 0.9}))


def test_large_gv_gives_flat_tree(tmp_path):
    report = build_and_train(small_config(**{"training.grouping_volatility": 100.0}), tmp_path / "b",
                             caps=CAPS)
    assert report.tree.depth == 1
    assert len(report.tree.root.children) == 4


def test_missing_checkpoint_names_node(small_build, tmp_path):
    _, build_dir, report = small_build
    with pytest.raises(FileNotFoundError, match="node 0"):
        load_node_networks(report.tree, tmp_path)


def test_tree_file_round_trips(small_build):
    _, build_dir, report = small_build
    assert load_tree(build_dir / "tree.json") == report.tree
