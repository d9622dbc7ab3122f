"""Gradient verification suite: analytic backward vs central differences.

Each entry builds a small fixed scenario, runs `grad_check`, and reports the
max relative error over that scenario's parameters. The stage-2 loss check
replays the real training loss (attention plus dropout head plus mean
cross-entropy) on a two-sample batch with a pinned dropout mask.
"""

from __future__ import annotations

import numpy as np

from .backbones import default_backbone_config, init_backbone, backbone_node, init_cham, cham_node
from .fileio import RunConfig
from .gldm import attention_block_node, gldm_node, init_attention_block
from .numerics import (Node, Parameter, RngState, const, conv2d, global_avg_pool,
                       grad_check, layer_norm, leaf, matmul, mul, sum_all)
from .recognition import cross_entropy_node, head_logits, init_head
from .training import Model
from .numerics import mean_of

GRAD_TOL = 1e-4


def _weighted_sum(node: Node, rng) -> Node:
    return sum_all(mul(node, const(rng.normal(0.0, 1.0, node.value.shape))))


def module_grad_checks(channels: int = 16, objects: int = 4, classes: int = 3,
                       heads: int = 4, seed: int = 12) -> dict[str, float]:
    """Run every per-operation check plus the full stage-2 loss check."""
    report: dict[str, float] = {}

    def run(name, fn, params):
        result = grad_check(fn, params)
        report[name] = max(result.values())

    rng = RngState(seed).generator(0)

    a = Parameter(rng.normal(0.0, 1.0, (3, 4)), "a")
    b = const(rng.normal(0.0, 1.0, (4, 2)))
    w_mm = rng.normal(0.0, 1.0, (3, 2))
    run("matmul", lambda: sum_all(mul(matmul(leaf(a), b), const(w_mm))), [a])

    cw = Parameter(rng.normal(0.0, 0.5, (3, 3, 2, 3)), "conv.w")
    cb = Parameter(rng.normal(0.0, 0.5, 3), "conv.b")
    cx = Parameter(rng.normal(0.0, 1.0, (6, 6, 2)), "conv.x")
    w_conv = rng.normal(0.0, 1.0, (3, 3, 3))
    run("conv2d",
        lambda: sum_all(mul(conv2d(leaf(cx), leaf(cw), leaf(cb), stride=2, pad=1),
                            const(w_conv))),
        [cx, cw, cb])

    gamma = Parameter(rng.normal(1.0, 0.2, 8), "ln.gamma")
    beta = Parameter(rng.normal(0.0, 0.2, 8), "ln.beta")
    lx = Parameter(rng.normal(0.0, 2.0, (4, 8)), "ln.x")
    w_ln = rng.normal(0.0, 1.0, (4, 8))
    run("layer_norm",
        lambda: sum_all(mul(layer_norm(leaf(lx), leaf(gamma), leaf(beta)), const(w_ln))),
        [lx, gamma, beta])

    cham = init_cham(8, 4, rng, "cham")
    grid = rng.normal(0.0, 1.0, (4, 4, 8))
    w_cham = rng.normal(0.0, 1.0, (4, 4, 8))
    run("cham",
        lambda: sum_all(mul(cham_node(const(grid), cham), const(w_cham))),
        [cham.w1, cham.w2])

    ssrm = init_backbone(default_backbone_config(objects, 8, factor=8,
                                                 cham_reduction=4), rng, "ssrm")
    scores_in = rng.random((8, 8, objects))
    w_ssrm = rng.normal(0.0, 1.0, (1, 1, 8))
    run("backbone_scores",
        lambda: sum_all(mul(backbone_node(const(scores_in), ssrm), const(w_ssrm))),
        ssrm.parameters("ssrm"))

    ifem = init_backbone(default_backbone_config(3, 8, factor=8), rng, "ifem")
    image_in = rng.normal(0.0, 1.0, (8, 8, 3))
    w_ifem = rng.normal(0.0, 1.0, (1, 1, 8))
    run("backbone_image",
        lambda: sum_all(mul(backbone_node(const(image_in), ifem), const(w_ifem))),
        ifem.parameters("ifem"))

    head_s = init_head(8, classes, 0.0, rng, "head_s")
    head_i = init_head(8, classes, 0.0, rng, "head_i")

    def both_branches():
        pooled_s = global_avg_pool(backbone_node(const(scores_in), ssrm))
        pooled_i = global_avg_pool(backbone_node(const(image_in), ifem))
        loss_s = cross_entropy_node(head_logits(pooled_s, head_s), 1)
        loss_i = cross_entropy_node(head_logits(pooled_i, head_i), 0)
        return mean_of([loss_s, loss_i])

    run("backbones_with_heads", both_branches,
        ssrm.parameters("ssrm") + ifem.parameters("ifem")
        + [head_s.weight, head_s.bias, head_i.weight, head_i.bias])

    block = init_attention_block(channels, heads, rng, "enc")
    seq = rng.normal(0.0, 1.0, (objects + 1, channels))
    w_blk = rng.normal(0.0, 1.0, seq.shape)
    block_params = [p for _, p in block.named_params("enc")]
    run("encoder_block",
        lambda: sum_all(mul(attention_block_node(const(seq), block), const(w_blk))),
        block_params)

    decoder = init_attention_block(channels, heads, rng, "dec")
    dec_params = [p for _, p in decoder.named_params("dec")]
    run("decoder_block",
        lambda: sum_all(mul(attention_block_node(const(seq), decoder), const(w_blk))),
        dec_params)

    report["stage2_loss"] = max(stage2_loss_check(channels, objects, classes,
                                                  heads, seed).values())
    return report


def stage2_loss_check(channels: int = 16, objects: int = 4, classes: int = 3,
                      heads: int = 4, seed: int = 12) -> dict[str, float]:
    """Gradient check of the complete stage-2 loss on a two-sample batch."""
    cfg = RunConfig(seed=seed, channels=channels, objects=objects,
                    classes=classes, heads=heads)
    model = Model(cfg)
    rng = RngState(seed).generator(99)
    batch = []
    for label in (0, min(1, classes - 1)):
        ext_rgb = rng.normal(0.0, 1.0, (objects + 1, channels))
        ext_spa = rng.normal(0.0, 1.0, (objects + 1, channels))
        ext_rgb[1] = 0.0  # absent-object rows stay exactly zero
        ext_spa[1] = 0.0
        batch.append((ext_rgb, ext_spa, label))
    params = model.stage2_params("full")

    def loss_fn():
        drop_rng = RngState(seed).generator(7)
        nodes = []
        for ext_rgb, ext_spa, label in batch:
            f_o = gldm_node(ext_rgb, ext_spa, model.gldm, with_decoder=True)
            logits = head_logits(f_o, model.head, "train", drop_rng)
            nodes.append(cross_entropy_node(logits, label))
        return mean_of(nodes)

    return grad_check(loss_fn, params)
