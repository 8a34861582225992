import json
from dataclasses import replace

import pytest
import torch
from torch import nn
from hypothesis import given, settings, strategies as st

from trunkrepro.datakit import ImageSet
from trunkrepro.evaluator import (
    EvalResult,
    evaluate,
    evaluate_build,
    infer_image,
    load_claims,
    load_result,
    route_batch,
    save_result,
    verify_pretrained,
)
from trunkrepro.tree import tree_from_groupings

from conftest import desk_config


class Oracle(nn.Module):
    """Reads the category from pixel (0,0,0) and answers the group holding it."""

    def __init__(self, grouping):
        super().__init__()
        self.owner = {c: i for i, g in enumerate(grouping) for c in g}
        self.probe = nn.Linear(1, len(grouping))

    def forward(self, x):
        self.probe(x[:, :1, 0, 0])  # costs 2 * groups FLOPs, output unused
        cats = x[:, 0, 0, 0].round().long().tolist()
        groups = torch.tensor([self.owner.get(c, 0) for c in cats])
        return nn.functional.one_hot(groups, len(self.probe.weight)).float()


class Coin(nn.Module):
    def __init__(self, k, seed):
        super().__init__()
        self.k = k
        self.gen = torch.Generator().manual_seed(seed)

    def forward(self, x):
        return torch.rand((x.shape[0], self.k), generator=self.gen)


def two_level():
    return tree_from_groupings("toy", 0.5, {(0, 1, 2, 3): ((0, 1), (2, 3))}, range(4))


def oracle_nets(tree):
    return {n.id: Oracle(n.grouping) for n in tree.internal_nodes()}


def labelled(cats, shape=(3, 4, 4)):
    cats = torch.as_tensor(cats)
    images = cats.float().view(-1, 1, 1, 1).expand(-1, *shape).contiguous()
    return ImageSet(images, cats.clone(), cats.clone())


def raw_config():
    # evaluation without normalization so pixel values stay category ids
    config = desk_config()
    splits = {**config.splits, "test": replace(config.splits["test"], transforms=())}
    return replace(config, splits=splits)


def test_oracle_paths_are_exact():
    tree = two_level()
    nets = oracle_nets(tree)
    assert infer_image(tree, labelled([3]).images[0], nets) == (3, ["0", "0.1", "0.1.1"])
    assert infer_image(tree, labelled([0]).images[0], nets) == (0, ["0", "0.0", "0.0.0"])
    preds, paths = route_batch(tree, labelled([2, 1, 0]).images, nets)
    assert preds == [2, 1, 0]
    assert paths[0] == ["0", "0.1", "0.1.0"]


def test_oracle_evaluation_counts_flops_per_path():
    tree = two_level()
    data = labelled([0, 1, 2, 3] * 5)
    result = evaluate(tree, data, raw_config(), oracle_nets(tree))
    assert result.accuracy == 1.0
    assert result.path_length_histogram == {3: 20}
    assert result.mean_flops_per_image == 8  # two nodes, 2 * 1 * 2 each


def test_argmax_tie_goes_to_lowest_index():
    tree = tree_from_groupings("toy", 0.5, {}, range(3))

    class Flat(nn.Module):
        def forward(self, x):
            return torch.full((x.shape[0], 3), 1 / 3)

    assert infer_image(tree, torch.zeros(3, 4, 4), {"0": Flat()})[0] == 0


def test_random_routing_is_near_chance():
    tree = tree_from_groupings("toy", 0.5, {}, range(10))
    data = labelled(list(range(10)) * 300)
    result = evaluate(tree, data, raw_config(), {"0": Coin(10, 0)}, batch_size=500)
    assert abs(result.accuracy - 0.1) < 0.03


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=40), st.integers(0, 10_000))
def test_accuracy_decomposes_over_categories(cats, seed):
    tree = two_level()
    nets = {n.id: Coin(len(n.children), seed + i) for i, n in enumerate(tree.internal_nodes())}
    r = evaluate(tree, labelled(cats), raw_config(), nets, batch_size=7)
    total = sum(r.per_category_total.values())
    assert total == len(cats) == r.n_images
    assert r.n_correct == sum(r.per_category_correct.values())
    weighted = sum(r.per_category_accuracy[c] * r.per_category_total[c] for c in r.per_category_total)
    assert weighted / total == pytest.approx(r.accuracy)


def test_missing_network_names_node():
    tree = two_level()
    nets = oracle_nets(tree)
    del nets["0.1"]
    with pytest.raises(FileNotFoundError, match="node 0.1"):
        evaluate(tree, labelled([0, 3]), raw_config(), nets)


def test_result_round_trip(tmp_path):
    tree = two_level()
    r = evaluate(tree, labelled([0, 1, 2, 3]), raw_config(), oracle_nets(tree))
    save_result(r, tmp_path / "e.json")
    assert load_result(tmp_path / "e.json") == r
    assert EvalResult.from_dict(json.loads(json.dumps(r.to_dict()))) == r


def test_no_tree_found(tmp_path):
    with pytest.raises(FileNotFoundError, match="no tree found"):
        evaluate_build(tmp_path)


def _claims(tmp_path, entries):
    path = tmp_path / "claims.json"
    path.write_text(json.dumps(entries))
    return path


def test_claims_single_object_or_list(tmp_path):
    assert load_claims(_claims(tmp_path, {"dataset": "cifar10", "accuracy": 0.9199})) == {"cifar10": 0.9199}
    both = [{"dataset": "svhn", "accuracy": 0.9675}, {"dataset": "emnist", "accuracy": 0.8577}]
    assert load_claims(_claims(tmp_path, both)) == {"svhn": 0.9675, "emnist": 0.8577}


def test_verify_statuses(tmp_path, desk_build, desk_eval):
    config, build_dir, _ = desk_build
    measured = desk_eval.accuracy
    tree_file = build_dir / "tree.json"

    def run(claims, tol=0.001):
        return verify_pretrained(build_dir, tree_file, config, claims, tol)

    ok = run(_claims(tmp_path, {"dataset": "synthetic", "accuracy": measured + 0.0005}))
    assert ok.status == "pass" and ok.measured_accuracy == measured
    far = run(_claims(tmp_path, {"dataset": "synthetic", "accuracy": 0.9199}))
    assert far.status == ("pass" if abs(measured - 0.9199) <= 0.001 else "fail")
    assert far.gap == pytest.approx(abs(measured - 0.9199))
    loose = run(_claims(tmp_path, {"dataset": "synthetic", "accuracy": 0.9199}), tol=1.0)
    assert loose.status == "pass"
    assert run(_claims(tmp_path, {"dataset": "cifar10", "accuracy": 0.9199})).status == "unverifiable"
    assert run(None).status == "unverifiable"
