"""Surrogate conv backbones: score-tensor branch, image branch, channel attention.

Both branches are small residual stacks (stride-2 stem plus stride-2 stages)
standing in for much larger pretrained networks. The score branch interleaves
a channel-attention gate after every stage; the image branch keeps its full
spatial extent (no global pooling) so later stages can aggregate per object.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError
from .filtering import ScoreTensor
from .numerics import (FLOAT, Node, Parameter, _as_node, add, bilinear_resize,
                       conv2d, global_avg_pool, global_max_pool, leaf,
                       matmul_fast, mul, relu, sigmoid)
from .recognition import ClassifierHead, head_logits


@dataclass
class FeatureGrid:
    """Dense H' x W' x c feature map plus its downsample factor."""

    data: np.ndarray
    factor: int = 1

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=FLOAT)
        if self.data.ndim != 3:
            raise DimensionError(f"feature grid must be (H, W, C), got shape {self.data.shape}")

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def spatial(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]


@dataclass(frozen=True)
class BackboneConfig:
    in_channels: int
    stage_channels: tuple[int, ...] = (16, 32, 64)
    stem_channels: int = 16
    stem_stride: int = 2
    stage_strides: tuple[int, ...] = (2, 2, 2)
    blocks_per_stage: int = 1
    cham_reduction: int = 0  # 0 disables channel attention
    factor: int = 16

    def __post_init__(self):
        declared = self.stem_stride * int(np.prod(self.stage_strides))
        if declared != self.factor:
            raise ConfigError(
                f"stride product {declared} does not match declared factor {self.factor}")
        if len(self.stage_channels) != len(self.stage_strides):
            raise ConfigError("stage_channels and stage_strides lengths differ")
        if self.cham_reduction:
            for c in self.stage_channels:
                if c % self.cham_reduction:
                    raise ConfigError(
                        f"channel attention reduction {self.cham_reduction} "
                        f"does not divide stage width {c}")

    @property
    def out_channels(self) -> int:
        return self.stage_channels[-1]


def default_backbone_config(in_channels: int, out_channels: int, factor: int = 16,
                            cham_reduction: int = 0) -> BackboneConfig:
    n_stages = int(np.log2(factor)) - 1
    if factor < 4 or 2 ** (n_stages + 1) != factor:
        raise ConfigError(f"downsample factor must be a power of two >= 4, got {factor}")
    widths = tuple(max(4, out_channels // 2 ** (n_stages - 1 - i)) for i in range(n_stages))
    return BackboneConfig(in_channels=in_channels, stage_channels=widths,
                          stem_channels=widths[0], stage_strides=(2,) * n_stages,
                          cham_reduction=cham_reduction, factor=factor)


def _kaiming(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), shape)


@dataclass
class ChamParams:
    """Shared two-layer bottleneck (c -> c/r -> c) for the avg and max branches."""

    w1: Parameter
    w2: Parameter

    def named_params(self, prefix: str):
        yield f"{prefix}.w1", self.w1
        yield f"{prefix}.w2", self.w2


def init_cham(channels: int, reduction: int, rng: np.random.Generator,
              prefix: str) -> ChamParams:
    if channels % reduction:
        raise ConfigError(f"reduction {reduction} does not divide {channels} channels")
    hidden = channels // reduction
    return ChamParams(
        w1=Parameter(_kaiming(rng, (channels, hidden), channels), f"{prefix}.w1"),
        w2=Parameter(_kaiming(rng, (hidden, channels), hidden), f"{prefix}.w2"))


def cham_node(x: Node, p: ChamParams) -> Node:
    """Channel gate: F * sigmoid(mlp(avgpool F) + mlp(maxpool F))."""
    def bottleneck(pooled: Node) -> Node:
        h = relu(matmul_fast(_reshape_row(pooled), leaf(p.w1)))
        return matmul_fast(h, leaf(p.w2))

    avg = bottleneck(global_avg_pool(x))
    mx = bottleneck(global_max_pool(x))
    gate = sigmoid(add(avg, mx))  # (1, c)
    return mul(x, _reshape_bcast(gate))


def _reshape_row(v: Node) -> Node:
    # (c,) -> (1, c) view with pass-through gradient
    return Node(v.value[None, :], ((v, lambda g: g[0]),) if v.needs_grad else (),
                needs_grad=v.needs_grad)


def _reshape_bcast(v: Node) -> Node:
    # (1, c) -> (1, 1, c) so elementwise mul broadcasts over H and W
    return Node(v.value[None, :, :], ((v, lambda g: g.sum(axis=0)),) if v.needs_grad else (),
                needs_grad=v.needs_grad)


def cham(grid: FeatureGrid, p: ChamParams) -> FeatureGrid:
    return FeatureGrid(cham_node(_as_node(grid.data), p).value, grid.factor)


@dataclass
class ConvParams:
    w: Parameter
    b: Parameter

    def named_params(self, prefix: str):
        yield f"{prefix}.w", self.w
        yield f"{prefix}.b", self.b


def _init_conv(rng, k, cin, cout, prefix) -> ConvParams:
    return ConvParams(
        w=Parameter(_kaiming(rng, (k, k, cin, cout), k * k * cin), f"{prefix}.w"),
        b=Parameter(np.zeros(cout), f"{prefix}.b"))


@dataclass
class ResidualBlockParams:
    conv1: ConvParams
    conv2: ConvParams
    skip: ConvParams | None
    stride: int

    def named_params(self, prefix: str):
        yield from self.conv1.named_params(f"{prefix}.conv1")
        yield from self.conv2.named_params(f"{prefix}.conv2")
        if self.skip is not None:
            yield from self.skip.named_params(f"{prefix}.skip")


@dataclass
class BackboneParams:
    config: BackboneConfig
    stem: ConvParams
    stages: list[list[ResidualBlockParams]]
    chams: list[ChamParams] = field(default_factory=list)

    def named_params(self, prefix: str):
        yield from self.stem.named_params(f"{prefix}.stem")
        for si, blocks in enumerate(self.stages):
            for bi, block in enumerate(blocks):
                yield from block.named_params(f"{prefix}.s{si}b{bi}")
        for si, ch in enumerate(self.chams):
            yield from ch.named_params(f"{prefix}.cham{si}")

    def parameters(self, prefix: str = "bb"):
        return [p for _, p in self.named_params(prefix)]


def init_backbone(cfg: BackboneConfig, rng: np.random.Generator,
                  prefix: str) -> BackboneParams:
    stem = _init_conv(rng, 3, cfg.in_channels, cfg.stem_channels, f"{prefix}.stem")
    stages, chams = [], []
    cin = cfg.stem_channels
    for si, (cout, stride) in enumerate(zip(cfg.stage_channels, cfg.stage_strides)):
        blocks = []
        for bi in range(cfg.blocks_per_stage):
            s = stride if bi == 0 else 1
            c_from = cin if bi == 0 else cout
            name = f"{prefix}.s{si}b{bi}"
            skip = None
            if s != 1 or c_from != cout:
                skip = _init_conv(rng, 1, c_from, cout, f"{name}.skip")
            blocks.append(ResidualBlockParams(
                conv1=_init_conv(rng, 3, c_from, cout, f"{name}.conv1"),
                conv2=_init_conv(rng, 3, cout, cout, f"{name}.conv2"),
                skip=skip, stride=s))
        stages.append(blocks)
        if cfg.cham_reduction:
            chams.append(init_cham(cout, cfg.cham_reduction, rng, f"{prefix}.cham{si}"))
        cin = cout
    return BackboneParams(cfg, stem, stages, chams)


def _residual_block(x: Node, p: ResidualBlockParams) -> Node:
    h = relu(conv2d(x, leaf(p.conv1.w), leaf(p.conv1.b), stride=p.stride, pad=1))
    h = conv2d(h, leaf(p.conv2.w), leaf(p.conv2.b), stride=1, pad=1)
    shortcut = x if p.skip is None else conv2d(x, leaf(p.skip.w), leaf(p.skip.b),
                                               stride=p.stride, pad=0)
    return relu(add(h, shortcut))


def backbone_node(x: Node, params: BackboneParams) -> Node:
    cfg = params.config
    if x.value.shape[2] != cfg.in_channels:
        raise ConfigError(
            f"backbone expects {cfg.in_channels} input channels, got {x.value.shape[2]}")
    h = relu(conv2d(x, leaf(params.stem.w), leaf(params.stem.b),
                    stride=cfg.stem_stride, pad=1))
    for si, blocks in enumerate(params.stages):
        for block in blocks:
            h = _residual_block(h, block)
        if params.chams:
            h = cham_node(h, params.chams[si])
    return h


def ssrm_forward(filtered: ScoreTensor, params: BackboneParams) -> FeatureGrid:
    """Spatial-context features from a filtered score tensor."""
    out = backbone_node(_as_node(filtered.data), params)
    return FeatureGrid(out.value, params.config.factor)


def ifem_forward(image: np.ndarray, params: BackboneParams) -> FeatureGrid:
    """Deep image features; keeps spatial extent (no global pooling on top)."""
    out = backbone_node(_as_node(np.asarray(image, dtype=FLOAT)), params)
    return FeatureGrid(out.value, params.config.factor)


def align_spatial(grid: FeatureGrid, target: tuple[int, int]) -> FeatureGrid:
    """Bilinear resize of a feature grid to the target spatial shape."""
    out = bilinear_resize(_as_node(grid.data), target[0], target[1])
    return FeatureGrid(out.value, grid.factor)


def baseline_head(grid: FeatureGrid, head: ClassifierHead) -> np.ndarray:
    """Pooled-classifier logits: global average pool then affine (eval mode)."""
    pooled = global_avg_pool(_as_node(grid.data))
    return head_logits(pooled, head).value
