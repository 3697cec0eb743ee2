"""Multi-head nested U-Net: segmentation decoder plus a DSNT needle branch.

Node ``X(i, j)`` follows nested U-Net indexing: ``i`` is the resolution
level (0 = full resolution) and ``j`` the decoder column (0 = encoder).
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from .errors import ConfigError, ShapeError
from .nn_ops import (
    BatchNormParams,
    batchnorm2d,
    concat_channels,
    conv2d,
    dsnt,
    maxpool2x2,
    spatial_softmax,
    upsample_bilinear2x,
)
from .tensor import Tensor, relu, sigmoid


@dataclass
class ModelConfig:
    input_size: int = 512
    depth: int = 3
    channels: list[int] = field(default_factory=lambda: [32, 64, 128, 256])
    seg_classes: int = 2
    seed: int = 0

    def validate(self) -> None:
        if self.depth < 1:
            raise ConfigError(f"model.depth must be >= 1, got {self.depth}")
        if self.input_size < 2**self.depth or self.input_size % (2**self.depth):
            raise ConfigError(f"model.input_size {self.input_size} must be divisible by 2**depth = {2**self.depth}")
        if len(self.channels) != self.depth + 1:
            raise ConfigError(f"model.channels needs depth+1 = {self.depth + 1} entries, got {len(self.channels)}")
        if any(int(c) < 1 for c in self.channels):
            raise ConfigError(f"model.channels must be positive, got {self.channels}")
        if self.seg_classes < 1:
            raise ConfigError(f"model.seg_classes must be >= 1, got {self.seg_classes}")

    @property
    def heatmap_size(self) -> int:
        return self.input_size // 2**self.depth

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelOutput:
    seg: Tensor  # [N, classes, S, S] in [0, 1]
    heatmap: Tensor  # [N, S/2^depth, S/2^depth], sums to 1
    coords: Tensor  # [N, 2] normalized (x, y)


class Conv:
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator, dtype):
        bound = np.sqrt(6.0 / (cin * k * k))  # He-uniform
        self.weight = Tensor(rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]


class DoubleConv:
    """conv3x3 -> relu -> conv3x3 -> relu, optionally closed by batchnorm."""

    def __init__(self, cin: int, cout: int, rng, dtype, norm: bool):
        self.conv1 = Conv(cin, cout, 3, rng, dtype)
        self.conv2 = Conv(cout, cout, 3, rng, dtype)
        self.bn = BatchNormParams.create(cout, dtype) if norm else None

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        x = relu(self.conv2(relu(self.conv1(x))))
        if self.bn is not None:
            x = batchnorm2d(x, self.bn, training)
        return x


class DecoderNode:
    """X(i, j): upsample X(i+1, j-1), two convs, concat with X(i, 0..j-1), two convs, batchnorm."""

    def __init__(self, i: int, j: int, channels: list[int], rng, dtype):
        c = channels[i]
        self.i, self.j = i, j
        self.up = DoubleConv(channels[i + 1], c, rng, dtype, norm=False)
        self.merge = DoubleConv(c * j + c, c, rng, dtype, norm=True)

    def __call__(self, below: Tensor, skips: list[Tensor], training: bool) -> Tensor:
        up = self.up(upsample_bilinear2x(below), training)
        cat = concat_channels(skips + [up])
        if cat.shape[1] != self.merge.conv1.in_channels:
            raise ShapeError(f"X({self.i},{self.j}): concat width {cat.shape[1]} != {self.merge.conv1.in_channels}")
        return self.merge(cat, training)


class Model:
    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        cfg.validate()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(cfg.seed)
        ch = [int(c) for c in cfg.channels]
        self.encoder = [DoubleConv(1 if i == 0 else ch[i - 1], ch[i], rng, dtype, norm=True) for i in range(cfg.depth + 1)]
        self.decoder: dict[tuple[int, int], DecoderNode] = {}
        for j in range(1, cfg.depth + 1):
            for i in range(cfg.depth - j, -1, -1):
                self.decoder[(i, j)] = DecoderNode(i, j, ch, rng, dtype)
        self.seg_head = Conv(ch[0], cfg.seg_classes, 3, rng, dtype)
        self.tip_head = Conv(ch[cfg.depth], 1, 1, rng, dtype)

    # --- parameter access -------------------------------------------------------
    def _modules(self) -> Iterator[tuple[str, object]]:
        for i, blk in enumerate(self.encoder):
            yield f"enc{i}", blk
        for (i, j), node in self.decoder.items():
            yield f"dec{i}_{j}.up", node.up
            yield f"dec{i}_{j}.merge", node.merge
        yield "seg_head", self.seg_head
        yield "tip_head", self.tip_head

    def named_parameters(self) -> "OrderedDict[str, Tensor]":
        out: OrderedDict[str, Tensor] = OrderedDict()
        for name, mod in self._modules():
            if isinstance(mod, Conv):
                out[f"{name}.weight"] = mod.weight
                out[f"{name}.bias"] = mod.bias
                continue
            for cname in ("conv1", "conv2"):
                conv = getattr(mod, cname)
                out[f"{name}.{cname}.weight"] = conv.weight
                out[f"{name}.{cname}.bias"] = conv.bias
            if mod.bn is not None:
                out[f"{name}.bn.gamma"] = mod.bn.gamma
                out[f"{name}.bn.beta"] = mod.bn.beta
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def named_buffers(self) -> "OrderedDict[str, np.ndarray]":
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, mod in self._modules():
            bn = getattr(mod, "bn", None)
            if bn is not None:
                out[f"{name}.bn.running_mean"] = bn.running_mean
                out[f"{name}.bn.running_var"] = bn.running_var
        return out

    # --- forward --------------------------------------------------------------------
    def encode(self, x: Tensor, training: bool = False) -> list[Tensor]:
        """Encoder activations X(0,0) .. X(depth,0); the last is the bottleneck."""
        s = self.cfg.input_size
        if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (s, s):
            raise ShapeError(f"model expects input [N,1,{s},{s}], got {x.shape}")
        feats = []
        h = x
        for i, blk in enumerate(self.encoder):
            if i > 0:
                h = maxpool2x2(h)
            h = blk(h, training)
            feats.append(h)
        return feats

    def forward(self, x: Tensor, training: bool = False) -> ModelOutput:
        depth = self.cfg.depth
        grid: dict[tuple[int, int], Tensor] = {(i, 0): f for i, f in enumerate(self.encode(x, training))}
        for (i, j), node in self.decoder.items():
            grid[(i, j)] = node(grid[(i + 1, j - 1)], [grid[(i, k)] for k in range(j)], training)
        seg = sigmoid(self.seg_head(grid[(0, depth)]))
        heatmap = spatial_softmax(self.tip_head(grid[(depth, 0)]))
        return ModelOutput(seg=seg, heatmap=heatmap, coords=dsnt(heatmap))

    __call__ = forward


def build_model(cfg: ModelConfig, dtype=np.float32) -> Model:
    return Model(cfg, dtype=dtype)


def param_count(m) -> int:
    """Scalar count of trainable parameters (running statistics excluded)."""
    if isinstance(m, Conv):
        return m.weight.size + m.bias.size
    return int(sum(p.size for p in m.parameters()))
