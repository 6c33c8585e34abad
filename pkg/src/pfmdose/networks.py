"""Agg and Infer dose-prediction networks.

Both share one layout: patch embedder, three :class:`PFMBlock` s, a per-token
linear "unpatch" map back to a spatial feature map, and a conv head
(Conv3x3+BN+ReLU, Conv3x3+BN+ReLU, Conv3x3+Sigmoid). Agg runs the blocks in
all three branch wirings; Infer runs only the target (self-attention) wiring.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import ops, pfmt
from .attention import BranchOutputs, PatchEmbedder, PFMBlock, embed_patches, msa, pfm_forward, unpatchify
from .errors import ConfigError, DimensionError
from .module import Module, constant, parameter
from .tensor import Tensor

NUM_BLOCKS = 3


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    in_channels: int = 3
    embed_dim: int = 32
    heads: int = 4
    ffn_mult: int = 4
    head_channels: int = 16


class ConvHead(Module):
    def __init__(self, in_channels: int, width: int, rng):
        super().__init__()
        self.conv1_w = parameter(rng, (width, in_channels, 3, 3), math.sqrt(2.0 / (9 * in_channels)))
        self.conv1_b = constant((width,), 0.0)
        self.bn1_g = constant((width,), 1.0)
        self.bn1_b = constant((width,), 0.0)
        self.conv2_w = parameter(rng, (width, width, 3, 3), math.sqrt(2.0 / (9 * width)))
        self.conv2_b = constant((width,), 0.0)
        self.bn2_g = constant((width,), 1.0)
        self.bn2_b = constant((width,), 0.0)
        self.conv3_w = parameter(rng, (1, width, 3, 3), math.sqrt(1.0 / (9 * width)))
        self.conv3_b = constant((1,), 0.0)
        self.register_buffer("bn1_mean", np.zeros(width))
        self.register_buffer("bn1_var", np.ones(width))
        self.register_buffer("bn2_mean", np.zeros(width))
        self.register_buffer("bn2_var", np.ones(width))

    def __call__(self, x: Tensor) -> Tensor:
        h = ops.conv3x3(x, self.conv1_w, self.conv1_b)
        h = ops.relu(ops.batch_norm2d(h, self.bn1_g, self.bn1_b, self.bn1_mean, self.bn1_var, self.training))
        h = ops.conv3x3(h, self.conv2_w, self.conv2_b)
        h = ops.relu(ops.batch_norm2d(h, self.bn2_g, self.bn2_b, self.bn2_mean, self.bn2_var, self.training))
        return ops.sigmoid(ops.conv3x3(h, self.conv3_w, self.conv3_b))


class _DoseNet(Module):
    kind = "base"

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(seed)
        c = config
        self.embedder = PatchEmbedder(c.image_size, c.patch_size, c.in_channels, c.embed_dim, rng=rng)
        self.blocks = [PFMBlock(c.embed_dim, c.heads, c.ffn_mult, rng=rng) for _ in range(NUM_BLOCKS)]
        tile = c.patch_size * c.patch_size * c.head_channels
        self.unpatch_w = parameter(rng, (c.embed_dim, tile), 1.0 / math.sqrt(c.embed_dim))
        self.unpatch_b = constant((tile,), 0.0)
        self.head = ConvHead(c.head_channels, c.head_channels, rng)

    def embed(self, x: Tensor) -> Tensor:
        c = self.config
        if x.ndim != 4 or x.shape[1:] != (c.in_channels, c.image_size, c.image_size):
            raise DimensionError(
                f"expected input B x {c.in_channels} x {c.image_size} x {c.image_size}, got {x.shape}"
            )
        return embed_patches(x, self.embedder)

    def decode(self, tokens: Tensor) -> Tensor:
        """Final tokens ``B x N x d`` -> dose map ``B x 1 x H x W`` in (0, 1)."""
        c = self.config
        tiles = ops.linear(tokens, self.unpatch_w, self.unpatch_b)
        fmap = unpatchify(tiles, c.head_channels, c.image_size, c.image_size, c.patch_size)
        return self.head(fmap)


class AggNetwork(_DoseNet):
    """Aggregated network: source, target and polymerized branches over shared blocks."""

    kind = "agg"

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0, use_mca: bool = True):
        super().__init__(config, seed)
        self.use_mca = use_mca


class InferNetwork(_DoseNet):
    """Target-only network; same parameter layout as :class:`AggNetwork`."""

    kind = "infer"


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    x = ops.as_tensor(x)
    if x.ndim == 3:
        return ops.reshape(x, (1,) + x.shape), True
    return x, False


def _unbatch(y: Tensor, unbatched: bool) -> Tensor:
    return ops.reshape(y, y.shape[1:]) if unbatched else y


def agg_forward(net: AggNetwork, x_s: Tensor, x_t: Tensor) -> tuple[Tensor, Tensor, list[BranchOutputs]]:
    """Return (source dose, target dose, per-block branch outputs).

    Block ``i+1`` consumes ``(p_s, p_t)`` of block ``i``; each ``p_p`` is only
    exposed for the bridge loss. The unpatch map and conv head are shared by
    the two output paths.
    """
    xs, unb_s = _batched(x_s)
    xt, unb_t = _batched(x_t)
    if xs.shape != xt.shape:
        raise DimensionError(f"agg_forward: source {xs.shape} and target {xt.shape} batches differ")
    src, tgt = net.embed(xs), net.embed(xt)
    per_block = []
    for block in net.blocks:
        out = pfm_forward(src, tgt, block, use_mca=net.use_mca)
        per_block.append(out)
        src, tgt = out.p_s, out.p_t
    return _unbatch(net.decode(src), unb_s), _unbatch(net.decode(tgt), unb_t), per_block


def agg_target_forward(net: AggNetwork, x_t: Tensor) -> Tensor:
    """Target output path of Agg alone (it never depends on the source input)."""
    xt, unb = _batched(x_t)
    tokens = net.embed(xt)
    for block in net.blocks:
        tokens = msa(tokens, block)
    return _unbatch(net.decode(tokens), unb)


def build_infer_from_agg(net: AggNetwork) -> InferNetwork:
    infer = InferNetwork(net.config, seed=0)
    infer.load_state_dict(net.state_dict())  # value copies, no aliasing
    infer.train(net.training)
    return infer


def infer_forward(net: InferNetwork, x_t: Tensor) -> Tensor:
    xt, unb = _batched(x_t)
    tokens = net.embed(xt)
    for block in net.blocks:
        tokens = msa(tokens, block)
    return _unbatch(net.decode(tokens), unb)


def predict(net: _DoseNet, x: Tensor) -> Tensor:
    """Target-domain prediction for either network kind."""
    if isinstance(net, AggNetwork):
        return agg_target_forward(net, x)
    return infer_forward(net, x)


# -- checkpoints -------------------------------------------------------------

MODEL_CFG = "model.cfg"
MANIFEST = "manifest.csv"


def save_checkpoint(net: _DoseNet, directory) -> str:
    """One PFMT file per named parameter/buffer, a name->shape manifest, and model.cfg."""
    os.makedirs(directory, exist_ok=True)
    rows = []
    for name, value in net.state_dict().items():
        fname = f"{name}.pfmt"
        pfmt.write_tensor(os.path.join(directory, fname), value)
        rows.append((name, "x".join(str(s) for s in value.shape), fname))
    with open(os.path.join(directory, MANIFEST), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["name", "shape", "file"])
        writer.writerows(rows)
    with open(os.path.join(directory, MODEL_CFG), "w") as fh:
        fh.write(f"kind={net.kind}\n")
        if isinstance(net, AggNetwork):
            fh.write(f"use_mca={int(net.use_mca)}\n")
        for key, value in asdict(net.config).items():
            fh.write(f"{key}={value}\n")
    return str(directory)


def load_checkpoint(directory) -> _DoseNet:
    cfg_path = os.path.join(directory, MODEL_CFG)
    if not os.path.exists(cfg_path):
        raise ConfigError(f"no checkpoint at {directory} (missing {MODEL_CFG})")
    values = {}
    with open(cfg_path) as fh:
        for line in fh:
            if line.strip():
                key, _, value = line.strip().partition("=")
                values[key] = value
    config = ModelConfig(**{f.name: int(values[f.name]) for f in fields(ModelConfig)})
    kind = values.get("kind")
    if kind == "agg":
        net: _DoseNet = AggNetwork(config, use_mca=bool(int(values.get("use_mca", "1"))))
    elif kind == "infer":
        net = InferNetwork(config)
    else:
        raise ConfigError(f"unknown checkpoint kind {kind!r}")
    state = {}
    with open(os.path.join(directory, MANIFEST)) as fh:
        for row in csv.DictReader(fh):
            arr = pfmt.read_array(os.path.join(directory, row["file"]))
            shape = tuple(int(s) for s in row["shape"].split("x")) if row["shape"] else ()
            if arr.shape != shape:
                raise ConfigError(f"{row['name']}: manifest shape {shape} != file shape {arr.shape}")
            state[row["name"]] = arr
    net.load_state_dict(state)
    net.eval()
    return net
