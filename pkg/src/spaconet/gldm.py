"""Global-local dependency modeling over extended semantic sequences.

Two one-layer pre-norm attention encoders (one per feature branch) run on the
object sequences extended with a trailing global node, their outputs merge by
elementwise maximum, and a single decoder block of the same shape refines the
merged sequence. The classifier consumes the decoded global-node row.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .aggregation import SemanticSequence
from .backbones import FeatureGrid
from .errors import ConfigError, DimensionError
from .numerics import (FLOAT, Node, Parameter, _as_node, add, affine,
                       concat_cols, concat_rows, const, gelu, global_avg_pool,
                       layer_norm, leaf, matmul_fast, maximum, row, scale,
                       softmax_lastdim, transpose)

LN_EPS = 1e-5


@dataclass
class ExtendedSequence:
    """(l+1) x c sequence whose last row is the global node."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=FLOAT)
        if self.data.ndim != 2 or self.data.shape[0] < 2:
            raise DimensionError(
                f"extended sequence must be (l+1, c) with l >= 1, got {self.data.shape}")

    @property
    def global_index(self) -> int:
        return self.data.shape[0] - 1


@dataclass
class AttentionBlockParams:
    """Pre-norm block: LN, per-head QKV attention, LN, 4x-expansion MLP.

    The q/k/v projections are bias-free; a key bias in particular is a no-op
    under softmax shift invariance and only adds degenerate parameters.
    """

    heads: int
    ln1_gamma: Parameter
    ln1_beta: Parameter
    q_w: list[Parameter]
    k_w: list[Parameter]
    v_w: list[Parameter]
    out_w: Parameter
    out_b: Parameter
    ln2_gamma: Parameter
    ln2_beta: Parameter
    mlp_w1: Parameter
    mlp_b1: Parameter
    mlp_w2: Parameter
    mlp_b2: Parameter

    def named_params(self, prefix: str):
        yield f"{prefix}.ln1.gamma", self.ln1_gamma
        yield f"{prefix}.ln1.beta", self.ln1_beta
        for h in range(self.heads):
            yield f"{prefix}.h{h}.q_w", self.q_w[h]
            yield f"{prefix}.h{h}.k_w", self.k_w[h]
            yield f"{prefix}.h{h}.v_w", self.v_w[h]
        yield f"{prefix}.out_w", self.out_w
        yield f"{prefix}.out_b", self.out_b
        yield f"{prefix}.ln2.gamma", self.ln2_gamma
        yield f"{prefix}.ln2.beta", self.ln2_beta
        yield f"{prefix}.mlp_w1", self.mlp_w1
        yield f"{prefix}.mlp_b1", self.mlp_b1
        yield f"{prefix}.mlp_w2", self.mlp_w2
        yield f"{prefix}.mlp_b2", self.mlp_b2


@dataclass
class GldmParams:
    """Exactly one encoder per branch plus one decoder, with learned positions."""

    pos_rgb: Parameter
    pos_spa: Parameter
    encoder_rgb: AttentionBlockParams
    encoder_spa: AttentionBlockParams
    decoder: AttentionBlockParams

    def named_params(self, prefix: str = "gldm"):
        yield f"{prefix}.pos_rgb", self.pos_rgb
        yield f"{prefix}.pos_spa", self.pos_spa
        yield from self.encoder_rgb.named_params(f"{prefix}.enc_rgb")
        yield from self.encoder_spa.named_params(f"{prefix}.enc_spa")
        yield from self.decoder.named_params(f"{prefix}.dec")


def init_attention_block(channels: int, heads: int, rng: np.random.Generator,
                         prefix: str) -> AttentionBlockParams:
    if channels % heads:
        raise ConfigError(f"head count {heads} does not divide {channels} channels")
    d = channels // heads
    std = np.sqrt(2.0 / channels)
    hidden = 4 * channels

    def proj(name, h):
        return Parameter(rng.normal(0.0, std, (channels, d)), f"{prefix}.h{h}.{name}")

    return AttentionBlockParams(
        heads=heads,
        ln1_gamma=Parameter(np.ones(channels), f"{prefix}.ln1.gamma"),
        ln1_beta=Parameter(np.zeros(channels), f"{prefix}.ln1.beta"),
        q_w=[proj("q_w", h) for h in range(heads)],
        k_w=[proj("k_w", h) for h in range(heads)],
        v_w=[proj("v_w", h) for h in range(heads)],
        out_w=Parameter(rng.normal(0.0, std, (channels, channels)), f"{prefix}.out_w"),
        out_b=Parameter(np.zeros(channels), f"{prefix}.out_b"),
        ln2_gamma=Parameter(np.ones(channels), f"{prefix}.ln2.gamma"),
        ln2_beta=Parameter(np.zeros(channels), f"{prefix}.ln2.beta"),
        mlp_w1=Parameter(rng.normal(0.0, std, (channels, hidden)), f"{prefix}.mlp_w1"),
        mlp_b1=Parameter(np.zeros(hidden), f"{prefix}.mlp_b1"),
        mlp_w2=Parameter(rng.normal(0.0, np.sqrt(2.0 / hidden), (hidden, channels)),
                         f"{prefix}.mlp_w2"),
        mlp_b2=Parameter(np.zeros(channels), f"{prefix}.mlp_b2"))


def init_gldm(num_objects: int, channels: int, heads: int,
              rng: np.random.Generator, prefix: str = "gldm") -> GldmParams:
    shape = (num_objects + 1, channels)
    return GldmParams(
        pos_rgb=Parameter(rng.normal(0.0, 0.02, shape), f"{prefix}.pos_rgb"),
        pos_spa=Parameter(rng.normal(0.0, 0.02, shape), f"{prefix}.pos_spa"),
        encoder_rgb=init_attention_block(channels, heads, rng, f"{prefix}.enc_rgb"),
        encoder_spa=init_attention_block(channels, heads, rng, f"{prefix}.enc_spa"),
        decoder=init_attention_block(channels, heads, rng, f"{prefix}.dec"))


def extend_with_global(seq: SemanticSequence, grid: FeatureGrid) -> ExtendedSequence:
    """Append the grid's global average feature as the final sequence row."""
    if seq.data.shape[1] != grid.channels:
        raise DimensionError(
            f"channel mismatch: sequence has {seq.data.shape[1]}, grid has {grid.channels}")
    pooled = global_avg_pool(_as_node(grid.data)).value
    return ExtendedSequence(np.vstack([seq.data, pooled[None, :]]))


def add_positional(seq: ExtendedSequence, pos: Parameter) -> ExtendedSequence:
    if pos.value.shape != seq.data.shape:
        raise DimensionError(
            f"positional embedding shape {pos.value.shape} does not match "
            f"sequence shape {seq.data.shape}")
    return ExtendedSequence(seq.data + pos.value)


def msa_node(x: Node, p: AttentionBlockParams, record: list | None = None) -> Node:
    """Scaled dot-product multi-head self-attention with output projection.

    When `record` is given, the per-head attention matrices (h, n, n) are
    appended to it as a plain array.
    """
    d = p.q_w[0].value.shape[1]
    inv_sqrt_d = 1.0 / np.sqrt(d)
    zero_bias = const(np.zeros(d))
    head_outputs = []
    attn_maps = []
    for h in range(p.heads):
        q = affine(x, leaf(p.q_w[h]), zero_bias)
        k = affine(x, leaf(p.k_w[h]), zero_bias)
        v = affine(x, leaf(p.v_w[h]), zero_bias)
        attn = softmax_lastdim(scale(matmul_fast(q, transpose(k)), inv_sqrt_d))
        attn_maps.append(attn.value)
        head_outputs.append(matmul_fast(attn, v))
    if record is not None:
        record.append(np.stack(attn_maps))
    merged = concat_cols(head_outputs)
    return affine(merged, leaf(p.out_w), leaf(p.out_b))


def msa(seq: ExtendedSequence, p: AttentionBlockParams,
        record: list | None = None) -> ExtendedSequence:
    return ExtendedSequence(msa_node(_as_node(seq.data), p, record).value)


def attention_block_node(x: Node, p: AttentionBlockParams,
                         record: list | None = None) -> Node:
    """x3 = x + MSA(LN(x)); x4 = x3 + MLP(LN(x3))."""
    normed = layer_norm(x, leaf(p.ln1_gamma), leaf(p.ln1_beta), LN_EPS)
    x3 = add(x, msa_node(normed, p, record))
    normed2 = layer_norm(x3, leaf(p.ln2_gamma), leaf(p.ln2_beta), LN_EPS)
    hidden = gelu(affine(normed2, leaf(p.mlp_w1), leaf(p.mlp_b1)))
    return add(x3, affine(hidden, leaf(p.mlp_w2), leaf(p.mlp_b2)))


def encoder_block(seq: ExtendedSequence, p: AttentionBlockParams,
                  record: list | None = None) -> ExtendedSequence:
    return ExtendedSequence(attention_block_node(_as_node(seq.data), p, record).value)


def decoder_block(seq: ExtendedSequence, p: AttentionBlockParams,
                  record: list | None = None) -> ExtendedSequence:
    return ExtendedSequence(attention_block_node(_as_node(seq.data), p, record).value)


def merge_max(a: ExtendedSequence, b: ExtendedSequence) -> ExtendedSequence:
    if a.data.shape != b.data.shape:
        raise DimensionError(f"merge shapes differ: {a.data.shape} vs {b.data.shape}")
    return ExtendedSequence(np.maximum(a.data, b.data))


def extract_global_node(seq: ExtendedSequence) -> np.ndarray:
    return seq.data[seq.global_index].copy()


@dataclass
class AttentionRecord:
    """Per-layer attention matrices captured during a forward pass."""

    encoder_rgb: list = field(default_factory=list)
    encoder_spa: list = field(default_factory=list)
    decoder: list = field(default_factory=list)


def gldm_node(x_rgb_ext: np.ndarray, x_spa_ext: np.ndarray, params: GldmParams,
              with_decoder: bool = True, record: AttentionRecord | None = None) -> Node:
    """Graph forward from extended sequences to the decoded global-node vector."""
    rgb_in = add(const_seq(x_rgb_ext), leaf(params.pos_rgb))
    spa_in = add(const_seq(x_spa_ext), leaf(params.pos_spa))
    enc_rgb = attention_block_node(rgb_in, params.encoder_rgb,
                                   record.encoder_rgb if record else None)
    enc_spa = attention_block_node(spa_in, params.encoder_spa,
                                   record.encoder_spa if record else None)
    merged = maximum(enc_rgb, enc_spa)
    decoded = attention_block_node(merged, params.decoder,
                                   record.decoder if record else None) \
        if with_decoder else merged
    return row(decoded, x_rgb_ext.shape[0] - 1)


def const_seq(x: np.ndarray) -> Node:
    return _as_node(np.asarray(x, dtype=FLOAT))


def gldm_forward(x_rgb: SemanticSequence, x_spa: SemanticSequence,
                 grid_rgb: FeatureGrid, grid_spa: FeatureGrid, params: GldmParams,
                 with_decoder: bool = True,
                 record: AttentionRecord | None = None) -> np.ndarray:
    """Full module forward; returns the modified global node feature (c,)."""
    ext_rgb = extend_with_global(x_rgb, grid_rgb)
    ext_spa = extend_with_global(x_spa, grid_spa)
    return gldm_node(ext_rgb.data, ext_spa.data, params, with_decoder, record).value
