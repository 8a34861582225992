import pytest
import torch
from torch import nn
from hypothesis import given, settings, strategies as st

from trunkrepro.model import (
    BackboneSpec,
    LayerNorm2d,
    NodeNetwork,
    ShapeError,
    count_flops,
    infer_shapes,
    load_network,
    make_node_network,
    node_seed,
    norm_layers,
    save_network,
    set_norm_mode,
)


def tiny_spec(shape=(3, 8, 8)):
    blocks = ({"type": "conv", "out_channels": 4, "kernel": 3, "padding": 1}, {"type": "norm"},
              {"type": "relu"}, {"type": "gap"})
    return BackboneSpec("tiny", blocks, shape)


@pytest.mark.parametrize("family", ["mobilenet", "vgg"])
def test_shipped_backbones_produce_distributions(family):
    spec = BackboneSpec.load(family, (3, 32, 32))
    net = make_node_network(spec, 4, init_seed=0).eval()
    out = net(torch.rand(5, 3, 32, 32))
    assert out.shape == (5, 4)
    assert torch.allclose(out.sum(dim=1), torch.ones(5), atol=1e-6)


def test_single_group_outputs_one():
    net = make_node_network(tiny_spec(), 1, init_seed=3).eval()
    assert torch.equal(net(torch.rand(3, 3, 8, 8)), torch.ones(3, 1))


def test_seeded_init_is_identical_and_seed_sensitive():
    a = make_node_network(tiny_spec(), 3, init_seed=11)
    b = make_node_network(tiny_spec(), 3, init_seed=11)
    c = make_node_network(tiny_spec(), 3, init_seed=12)
    for (ka, va), (_, vb), (_, vc) in zip(a.state_dict().items(), b.state_dict().items(),
                                          c.state_dict().items()):
        assert torch.equal(va, vb), ka
    assert not torch.equal(a.head.weight, c.head.weight)


def test_node_seed_depends_on_id():
    assert node_seed(42, "0") == node_seed(42, "0")
    assert node_seed(42, "0") != node_seed(42, "0.1")
    assert node_seed(42, "0") != node_seed(43, "0")


def test_shape_error_names_block():
    blocks = ({"type": "conv", "out_channels": 4, "kernel": 9}, {"type": "gap"})
    with pytest.raises(ShapeError, match=r"block 0 \(conv\)"):
        infer_shapes(BackboneSpec("bad", blocks, (3, 4, 4)))
    blocks = ({"type": "linear", "out_features": 2},)
    with pytest.raises(ShapeError, match=r"block 0 \(linear\)"):
        infer_shapes(BackboneSpec("bad", blocks, (3, 4, 4)))


def test_incompatible_input_raises_shape_error():
    net = make_node_network(tiny_spec(), 2, 0)
    with pytest.raises(ShapeError):
        count_flops(net, (1, 8, 8))


def test_set_norm_mode_swaps_every_norm():
    spec = BackboneSpec.load("vgg", (3, 32, 32))
    net = make_node_network(spec, 3, 0)
    n = len(norm_layers(net))
    layered = set_norm_mode(net, "layer")
    assert len(norm_layers(layered)) == n
    assert all(isinstance(m, LayerNorm2d) for m in norm_layers(layered))
    assert all(isinstance(m, nn.BatchNorm2d) for m in norm_layers(net))  # original untouched


def test_layer_mode_is_batch_independent():
    net = set_norm_mode(make_node_network(tiny_spec(), 3, 0), "layer").train()
    x = torch.rand(6, 3, 8, 8)
    full = net(x)
    alone = torch.cat([net(x[i:i + 1]) for i in range(6)])
    assert torch.allclose(full, alone, atol=1e-6)


def test_linear_flops():
    assert count_flops(nn.Sequential(nn.Linear(10, 1)), (10,)) == 20
    assert count_flops(nn.Sequential(nn.Identity()), (10,)) == 0


def test_depthwise_conv_flops():
    conv = nn.Conv2d(8, 8, 3, padding=1, groups=8, bias=False)
    assert count_flops(nn.Sequential(conv), (8, 4, 4)) == 2 * 4 * 4 * 8 * 9


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 16), min_size=1, max_size=4))
def test_linear_stack_flops_add_up(widths):
    dims = [5, *widths]
    layers = [nn.Linear(a, b) for a, b in zip(dims, dims[1:])]
    expected = sum(2 * a * b for a, b in zip(dims, dims[1:]))
    assert count_flops(nn.Sequential(*layers), (5,)) == expected


def test_checkpoint_round_trip(tmp_path):
    net = make_node_network(tiny_spec(), 3, init_seed=5).eval()
    save_network(net, tmp_path / "n")
    again = load_network(tmp_path / "n")
    x = torch.rand(4, 3, 8, 8)
    assert torch.equal(net(x), again(x))
    with pytest.raises(FileNotFoundError):
        load_network(tmp_path / "missing")


def test_replace_head_keeps_features():
    net = make_node_network(tiny_spec(), 4, 0)
    before = {k: v.clone() for k, v in net.features.state_dict().items()}
    net.replace_head(2, torch.Generator().manual_seed(1))
    assert net.head.out_features == 2 and net.out_groups == 2
    for k, v in net.features.state_dict().items():
        assert torch.equal(v, before[k])


def test_spec_dict_round_trip():
    spec = BackboneSpec.load("mobilenet", (3, 32, 32))
    assert BackboneSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ValueError):
        NodeNetwork(spec, 0)
