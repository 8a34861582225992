"""Shallow per-node networks, normalisation swapping and FLOPs accounting.

A backbone is data: an ordered list of layer descriptors (see the YAML files in
``backbones/``).  Supported descriptor types::

    conv     out_channels, kernel, stride=1, padding=0, groups=1 | "depthwise"
    norm     batch or layer, following the network's norm mode
    relu
    maxpool  kernel, stride=kernel
    gap      global average pooling to (C,)
    flatten
    linear   out_features

Every node network ends in a linear head with ``out_groups`` outputs.

FLOPs convention: one multiply-accumulate is 2 FLOPs (bias additions are not
counted); normalisation and activation layers cost 2 FLOPs per output element;
pooling costs 1 FLOP per input element.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
import yaml
from torch import nn

BACKBONE_DIR = Path(__file__).parent / "backbones"


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class BackboneSpec:
    family: str
    blocks: tuple
    input_shape: tuple

    @classmethod
    def load(cls, family_or_path: str, input_shape) -> "BackboneSpec":
        path = Path(family_or_path)
        if not path.suffix:
            path = BACKBONE_DIR / f"{family_or_path}.yaml"
        if not path.exists():
            raise FileNotFoundError(f"no backbone spec at {path}")
        raw = yaml.safe_load(path.read_text())
        spec = cls(raw["family"], tuple(dict(b) for b in raw["blocks"]), tuple(input_shape))
        infer_shapes(spec)
        return spec

    def to_dict(self) -> dict:
        return {"family": self.family, "blocks": [dict(b) for b in self.blocks],
                "input_shape": list(self.input_shape)}

    @classmethod
    def from_dict(cls, raw: dict) -> "BackboneSpec":
        return cls(raw["family"], tuple(dict(b) for b in raw["blocks"]), tuple(raw["input_shape"]))


def _conv_out(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def infer_shapes(spec: BackboneSpec) -> list[tuple]:
    """Output shape after each block; raises :class:`ShapeError` naming the block."""
    shape = tuple(spec.input_shape)
    shapes = []
    for i, block in enumerate(spec.blocks):
        kind = block.get("type")
        where = f"block {i} ({kind})"
        if kind == "conv":
            if len(shape) != 3:
                raise ShapeError(f"{where}: expects a (C,H,W) input, got {shape}")
            c, h, w = shape
            k = int(block["kernel"])
            s = int(block.get("stride", 1))
            p = int(block.get("padding", 0))
            groups = c if block.get("groups") == "depthwise" else int(block.get("groups", 1))
            out_c = int(block["out_channels"])
            if c % groups or out_c % groups:
                raise ShapeError(f"{where}: channels {c}->{out_c} not divisible by groups={groups}")
            oh, ow = _conv_out(h, k, s, p), _conv_out(w, k, s, p)
            if oh < 1 or ow < 1:
                raise ShapeError(f"{where}: kernel {k} too large for {h}x{w} input with padding {p}")
            shape = (out_c, oh, ow)
        elif kind == "maxpool":
            if len(shape) != 3:
                raise ShapeError(f"{where}: expects a (C,H,W) input, got {shape}")
            k = int(block["kernel"])
            s = int(block.get("stride", k))
            c, h, w = shape
            oh, ow = _conv_out(h, k, s, 0), _conv_out(w, k, s, 0)
            if oh < 1 or ow < 1:
                raise ShapeError(f"{where}: pool {k} too large for {h}x{w} input")
            shape = (c, oh, ow)
        elif kind == "gap":
            if len(shape) != 3:
                raise ShapeError(f"{where}: expects a (C,H,W) input, got {shape}")
            shape = (shape[0],)
        elif kind == "flatten":
            shape = (math.prod(shape),)
        elif kind == "linear":
            if len(shape) != 1:
                raise ShapeError(f"{where}: expects a flat input, got {shape}; add flatten or gap")
            shape = (int(block["out_features"]),)
        elif kind in ("norm", "relu"):
            pass
        else:
            raise ShapeError(f"{where}: unknown block type {kind!r}")
        shapes.append(shape)
    if shape and len(shape) != 1:
        raise ShapeError(f"backbone output {shape} is not flat; end with gap or flatten")
    return shapes


class LayerNorm2d(nn.GroupNorm):
    """Layer normalisation over (C, H, W) with per-channel affine parameters."""

    def __init__(self, num_channels: int):
        super().__init__(1, num_channels)


def make_norm(mode: str, shape) -> nn.Module:
    if mode == "batch":
        return nn.BatchNorm2d(shape[0]) if len(shape) == 3 else nn.BatchNorm1d(shape[0])
    if mode == "layer":
        return LayerNorm2d(shape[0]) if len(shape) == 3 else nn.LayerNorm(shape[0])
    raise ValueError(f"norm mode must be 'batch' or 'layer', got {mode!r}")


NORM_TYPES = (nn.BatchNorm1d, nn.BatchNorm2d, nn.GroupNorm, nn.LayerNorm)


def build_features(spec: BackboneSpec, norm_mode: str = "batch") -> tuple[nn.Sequential, int]:
    shapes = infer_shapes(spec)
    layers = []
    shape = tuple(spec.input_shape)
    for block, out_shape in zip(spec.blocks, shapes):
        kind = block["type"]
        if kind == "conv":
            groups = shape[0] if block.get("groups") == "depthwise" else int(block.get("groups", 1))
            layers.append(nn.Conv2d(shape[0], int(block["out_channels"]), int(block["kernel"]),
                                    stride=int(block.get("stride", 1)),
                                    padding=int(block.get("padding", 0)), groups=groups))
        elif kind == "norm":
            layers.append(make_norm(norm_mode, shape))
        elif kind == "relu":
            layers.append(nn.ReLU())
        elif kind == "maxpool":
            k = int(block["kernel"])
            layers.append(nn.MaxPool2d(k, stride=int(block.get("stride", k))))
        elif kind == "gap":
            layers.append(nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten()))
        elif kind == "flatten":
            layers.append(nn.Flatten())
        elif kind == "linear":
            layers.append(nn.Linear(shape[0], int(block["out_features"])))
        shape = out_shape
    width = shape[0] if shape else 0
    return nn.Sequential(*layers), width


class NodeNetwork(nn.Module):
    """Backbone plus linear head; ``forward`` returns softmax probabilities."""

    def __init__(self, spec: BackboneSpec, out_groups: int, norm_mode: str = "batch"):
        super().__init__()
        if out_groups < 1:
            raise ValueError(f"out_groups must be >= 1, got {out_groups}")
        self.spec = spec
        self.out_groups = out_groups
        self.norm_mode = norm_mode
        self.features, width = build_features(spec, norm_mode)
        self.head = nn.Linear(width, out_groups)

    def logits(self, x):
        return self.head(self.features(x))

    def log_proba(self, x):
        return F.log_softmax(self.logits(x), dim=1)

    def forward(self, x):
        return F.softmax(self.logits(x), dim=1)

    def replace_head(self, out_groups: int, generator: torch.Generator | None = None) -> None:
        self.out_groups = out_groups
        self.head = nn.Linear(self.head.in_features, out_groups)
        _init_linear(self.head, generator, head=True)


def node_seed(seed: int, node_id: str) -> int:
    """Stable per-node init seed, independent of the order nodes are trained in."""
    digest = hashlib.sha256(f"{seed}:{node_id}".encode()).hexdigest()
    return int(digest[:15], 16)


def _uniform_(tensor, bound, generator):
    with torch.no_grad():
        tensor.copy_((torch.rand(tensor.shape, generator=generator) * 2 - 1) * bound)


def _init_linear(layer, generator, head=False):
    fan_in = layer.weight[0].numel()
    bound = math.sqrt(1.0 / fan_in) if head else math.sqrt(6.0 / fan_in)
    _uniform_(layer.weight, bound, generator)
    if layer.bias is not None:
        nn.init.zeros_(layer.bias)


def initialize(network: NodeNetwork, init_seed: int) -> NodeNetwork:
    """Fan-in scaled uniform init drawn from a private generator."""
    gen = torch.Generator().manual_seed(init_seed)
    for module in network.features.modules():
        if isinstance(module, (nn.Conv2d, nn.Linear)):
            _init_linear(module, gen)
        elif isinstance(module, NORM_TYPES):
            module.reset_parameters()
    _init_linear(network.head, gen, head=True)
    return network


def make_node_network(spec: BackboneSpec, out_groups: int, init_seed: int,
                      norm_mode: str = "batch") -> NodeNetwork:
    return initialize(NodeNetwork(spec, out_groups, norm_mode), init_seed)


def norm_layers(network: nn.Module) -> list[nn.Module]:
    return [m for m in network.modules() if isinstance(m, NORM_TYPES)]


def set_norm_mode(network: NodeNetwork, mode: str) -> NodeNetwork:
    """Copy of ``network`` with every normalisation layer replaced by ``mode``,
    freshly initialised; all other parameters are kept."""
    if mode not in ("batch", "layer"):
        raise ValueError(f"norm mode must be 'batch' or 'layer', got {mode!r}")
    new = copy.deepcopy(network)
    shapes = infer_shapes(new.spec)
    shape_before = [tuple(new.spec.input_shape)] + shapes[:-1]
    for idx, (block, shape) in enumerate(zip(new.spec.blocks, shape_before)):
        if block["type"] == "norm":
            new.features[idx] = make_norm(mode, shape)
    new.norm_mode = mode
    return new


# ---------------------------------------------------------------------------
# FLOPs


def _module_flops(module, inp, out) -> int:
    if isinstance(module, nn.Conv2d):
        _, c_out, h, w = out.shape
        kh, kw = module.kernel_size
        macs = h * w * c_out * kh * kw * (module.in_channels // module.groups)
        return 2 * macs
    if isinstance(module, nn.Linear):
        return 2 * module.in_features * module.out_features
    if isinstance(module, NORM_TYPES) or isinstance(module, (nn.ReLU, nn.ReLU6)):
        return 2 * out[0].numel()
    if isinstance(module, (nn.MaxPool2d, nn.AvgPool2d, nn.AdaptiveAvgPool2d, nn.AdaptiveMaxPool2d)):
        return inp[0].numel()
    return 0


def count_flops(network: nn.Module, input_shape) -> int:
    """FLOPs of one forward pass on a single ``input_shape`` image."""
    total = 0

    def hook(module, args, output):
        nonlocal total
        total += _module_flops(module, args[0], output)

    leaves = [m for m in network.modules() if not list(m.children())]
    handles = [m.register_forward_hook(hook) for m in leaves]
    was_training = network.training
    network.eval()
    try:
        with torch.no_grad():
            x = torch.zeros((1, *input_shape))
            if isinstance(network, NodeNetwork):
                network.logits(x)
            else:
                network(x)
    except RuntimeError as exc:
        raise ShapeError(f"input shape {tuple(input_shape)} is incompatible with the network: {exc}") from exc
    finally:
        for h in handles:
            h.remove()
        network.train(was_training)
    return int(total)


# ---------------------------------------------------------------------------
# checkpoints


def save_network(network: NodeNetwork, directory: str | os.PathLike) -> Path:
    """Write ``weights.pt`` (state dict) and ``weights.json`` (architecture)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(network.state_dict(), directory / "weights.pt")
    meta = {"spec": network.spec.to_dict(), "out_groups": network.out_groups,
            "norm_mode": network.norm_mode}
    (directory / "weights.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return directory / "weights.pt"


def load_network(weights_path: str | os.PathLike) -> NodeNetwork:
    path = Path(weights_path)
    directory = path if path.is_dir() else path.parent
    meta_path = directory / "weights.json"
    if not meta_path.exists() or not (directory / "weights.pt").exists():
        raise FileNotFoundError(f"no checkpoint in {directory}")
    meta = json.loads(meta_path.read_text())
    net = NodeNetwork(BackboneSpec.from_dict(meta["spec"]), meta["out_groups"], meta["norm_mode"])
    net.load_state_dict(torch.load(directory / "weights.pt", weights_only=True))
    net.eval()
    return net
