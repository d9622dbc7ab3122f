"""Two-stage training: backbones with pooled heads first, attention head second.

Stage 1 trains the score-tensor branch and the image branch independently,
each under its own pooled classifier. Stage 2 freezes both branches, caches
their per-sample features once, and trains only the positional embeddings,
attention blocks and classifier. The optimizer is a loss-proportional
adaptive step: gamma = min(eta, loss / (sum of squared grads + delta)).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .aggregation import aggregate_pair, downsample_labels
from .backbones import (BackboneParams, FeatureGrid, align_spatial,
                        backbone_node, default_backbone_config, ifem_forward,
                        init_backbone, ssrm_forward)
from .errors import ConfigError, DataError, NumericsError
from .fileio import Checkpoint, Manifest, RunConfig, read_tensor
from .filtering import ScoreTensor, acf
from .gldm import (AttentionRecord, GldmParams, extend_with_global, gldm_node,
                   init_gldm)
from .numerics import (FLOAT, Node, Parameter, RngState, backward, const,
                       global_avg_pool, mean_of, zero_grads)
from .recognition import (ClassifierHead, cross_entropy_node, head_logits,
                          init_head, top1_accuracy)

VARIANTS = ("baseline", "ssrm_head", "merge_max", "no_decoder", "full")
ALIG_DELTA = 1e-5
CHAM_REDUCTION = 4

_INIT_STREAM = 0
_STAGE1_SSRM_STREAM = 1
_STAGE1_IFEM_STREAM = 2
_STAGE2_STREAMS = {"merge_max": 3, "no_decoder": 4, "full": 5}


@dataclass
class Sample:
    image: np.ndarray
    scores: np.ndarray
    label: int
    feat_rgb: np.ndarray | None = None  # optional precomputed feature grids
    feat_spa: np.ndarray | None = None


def load_samples(manifest: Manifest, feature_dir=None) -> list[Sample]:
    """Materialize a manifest; optional per-index feature files bypass backbones."""
    from pathlib import Path

    samples = []
    for i, (image_path, score_path, label) in enumerate(manifest.entries):
        image = read_tensor(image_path).astype(FLOAT)
        scores = read_tensor(score_path).astype(FLOAT)
        if image.ndim != 3 or image.shape[2] != 3:
            raise DataError(f"{image_path}: expected an (H, W, 3) image tensor")
        if scores.ndim != 3 or scores.shape[2] != manifest.num_objects:
            raise DataError(
                f"{score_path}: expected (H, W, {manifest.num_objects}) scores")
        sample = Sample(image, scores, label)
        if feature_dir is not None:
            rgb = Path(feature_dir) / f"feat_rgb_{i:05d}.spc"
            spa = Path(feature_dir) / f"feat_spa_{i:05d}.spc"
            if rgb.exists():
                sample.feat_rgb = read_tensor(rgb).astype(FLOAT)
            if spa.exists():
                sample.feat_spa = read_tensor(spa).astype(FLOAT)
        samples.append(sample)
    return samples


class Model:
    """All trainable parameters, deterministically initialized from one seed."""

    def __init__(self, cfg: RunConfig):
        cfg.validate()
        self.cfg = cfg
        rng = RngState(cfg.seed).generator(_INIT_STREAM)
        c = cfg.channels
        self.ssrm = init_backbone(
            default_backbone_config(cfg.objects, c, cfg.ssrm_factor,
                                    cham_reduction=CHAM_REDUCTION), rng, "ssrm")
        self.ifem = init_backbone(
            default_backbone_config(3, c, cfg.ifem_factor), rng, "ifem")
        self.ssrm_head = init_head(c, cfg.classes, cfg.dropout_stage1, rng, "ssrm_head")
        self.ifem_head = init_head(c, cfg.classes, cfg.dropout_stage1, rng, "ifem_head")
        self.merge_head = init_head(c, cfg.classes, cfg.dropout_stage2, rng, "merge_head")
        self.gldm = init_gldm(cfg.objects, c, cfg.heads, rng, "gldm")
        self.head = init_head(c, cfg.classes, cfg.dropout_stage2, rng, "head")

    def named_params(self) -> dict[str, Parameter]:
        out: dict[str, Parameter] = {}
        for name, p in self.ssrm.named_params("ssrm"):
            out[name] = p
        for name, p in self.ifem.named_params("ifem"):
            out[name] = p
        for head, prefix in ((self.ssrm_head, "ssrm_head"), (self.ifem_head, "ifem_head"),
                             (self.merge_head, "merge_head"), (self.head, "head")):
            for name, p in head.named_params(prefix):
                out[name] = p
        for name, p in self.gldm.named_params("gldm"):
            out[name] = p
        return out

    def backbone_param_names(self) -> list[str]:
        names = [n for n, _ in self.ssrm.named_params("ssrm")]
        names += [n for n, _ in self.ifem.named_params("ifem")]
        return names

    def stage2_params(self, variant: str) -> list[Parameter]:
        if variant == "merge_max":
            return [p for _, p in self.merge_head.named_params("merge_head")]
        params = [self.gldm.pos_rgb, self.gldm.pos_spa]
        for block in (self.gldm.encoder_rgb, self.gldm.encoder_spa):
            params += [p for _, p in block.named_params("enc")]
        if variant == "full":
            params += [p for _, p in self.gldm.decoder.named_params("dec")]
        params += [p for _, p in self.head.named_params("head")]
        return params

    def freeze_backbones(self):
        frozen_prefixes = ("ssrm.", "ifem.", "ssrm_head.", "ifem_head.")
        for name, p in self.named_params().items():
            if name.startswith(frozen_prefixes):
                p.frozen = True

    def backbone_hash(self) -> str:
        digest = hashlib.sha256()
        params = self.named_params()
        for name in self.backbone_param_names():
            digest.update(params[name].value.tobytes())
        return digest.hexdigest()


def make_checkpoint(model: Model, stage: int, variant: str, epoch: int,
                    names=None) -> Checkpoint:
    cfg = model.cfg
    header = {"stage": stage, "variant": variant, "epoch": epoch,
              "config_hash": cfg.config_hash()}
    for line in cfg.resolved_text().splitlines():
        key, value = (part.strip() for part in line.split("=", 1))
        header[key] = value
    params = model.named_params()
    selected = names if names is not None else list(params)
    return Checkpoint(header, {n: params[n].value.copy() for n in selected})


def restore_model(ckpts) -> Model:
    """Build a model from one or more checkpoints sharing a config."""
    ckpts = list(ckpts if isinstance(ckpts, (list, tuple)) else [ckpts])
    if not ckpts:
        raise ConfigError("no checkpoint given")
    model = Model(ckpts[0].config())
    load_params(model, ckpts)
    return model


def load_params(model: Model, ckpts):
    params = model.named_params()
    for ckpt in ckpts:
        for name, value in ckpt.params.items():
            if name not in params:
                raise ConfigError(f"checkpoint parameter '{name}' unknown to this model")
            if params[name].value.shape != value.shape:
                raise ConfigError(
                    f"checkpoint parameter '{name}' has shape {value.shape}, "
                    f"expected {params[name].value.shape}")
            params[name].value[...] = value


def alig_step(params, loss_value: float, eta: float, delta: float = ALIG_DELTA) -> float:
    """Adaptive step: gamma = min(eta, loss / (sum ||grad||^2 + delta))."""
    if not np.isfinite(loss_value):
        raise NumericsError(f"loss is not finite: {loss_value}")
    norm_sq = 0.0
    live = [p for p in params if not p.frozen]
    for p in live:
        if not np.all(np.isfinite(p.grad)):
            raise NumericsError(f"gradient of {p.name} is not finite")
        norm_sq += float((p.grad * p.grad).sum())
    gamma = min(eta, loss_value / (norm_sq + delta))
    for p in live:
        p.value -= gamma * p.grad
    return gamma


def _branch_logits(model: Model, branch: str, sample: Sample, mode: str, rng) -> Node:
    if branch == "ssrm":
        filtered = acf(ScoreTensor(sample.scores), model.cfg.acf_kernel)
        feat = backbone_node(const(filtered.data), model.ssrm)
        head = model.ssrm_head
    else:
        feat = backbone_node(const(sample.image), model.ifem)
        head = model.ifem_head
    return head_logits(global_avg_pool(feat), head, mode, rng)


def _train_branch(model: Model, samples: list[Sample], branch: str,
                  metrics: list | None) -> None:
    cfg = model.cfg
    stream = _STAGE1_SSRM_STREAM if branch == "ssrm" else _STAGE1_IFEM_STREAM
    rng = RngState(cfg.seed).generator(stream)
    head = model.ssrm_head if branch == "ssrm" else model.ifem_head
    params = (model.ssrm.parameters("ssrm") if branch == "ssrm"
              else model.ifem.parameters("ifem"))
    params = params + [head.weight, head.bias]
    for epoch in range(cfg.epochs_stage1):
        order = rng.permutation(len(samples))
        losses, preds, labels = [], [], []
        for start in range(0, len(order), cfg.batch_size):
            batch = [samples[i] for i in order[start : start + cfg.batch_size]]
            zero_grads(params)
            nodes = []
            for sample in batch:
                logits = _branch_logits(model, branch, sample, "train", rng)
                preds.append(int(np.argmax(logits.value)))
                labels.append(sample.label)
                nodes.append(cross_entropy_node(logits, sample.label))
            loss = mean_of(nodes)
            backward(loss)
            alig_step(params, float(loss.value), cfg.eta_stage1)
            losses.append(float(loss.value))
        if metrics is not None:
            metrics.append(f"stage1_{branch}\t{epoch}\t{np.mean(losses):.9f}\t"
                           f"{top1_accuracy(preds, labels):.6f}")


def train_stage1(samples: list[Sample], cfg: RunConfig,
                 metrics: list | None = None) -> tuple[Checkpoint, Checkpoint]:
    """Train both backbones with pooled heads; returns (score-branch, image-branch)."""
    if not samples:
        raise DataError("dataset is empty")
    model = Model(cfg)
    _train_branch(model, samples, "ssrm", metrics)
    _train_branch(model, samples, "ifem", metrics)
    names = model.named_params()
    ssrm_names = [n for n in names if n.startswith(("ssrm.", "ssrm_head."))]
    ifem_names = [n for n in names if n.startswith(("ifem.", "ifem_head."))]
    ck_ssrm = make_checkpoint(model, 1, "ssrm_head", cfg.epochs_stage1, ssrm_names)
    ck_ifem = make_checkpoint(model, 1, "baseline", cfg.epochs_stage1, ifem_names)
    return ck_ssrm, ck_ifem


@dataclass
class Stage2Features:
    """Frozen-backbone inputs cached once per sample for stage-2 training."""

    merged_pooled: np.ndarray  # (c,) gap of elementwise max of both grids
    ext_rgb: np.ndarray        # (l+1, c) extended sequence, image branch
    ext_spa: np.ndarray
    label: int


def branch_features(model: Model, sample: Sample) -> tuple[FeatureGrid, FeatureGrid]:
    """Image features plus aligned score-branch features for one sample."""
    if sample.feat_rgb is not None:
        f_i = FeatureGrid(sample.feat_rgb, model.cfg.ifem_factor)
    else:
        f_i = ifem_forward(sample.image, model.ifem)
    if sample.feat_spa is not None:
        f_s = FeatureGrid(sample.feat_spa, model.cfg.ssrm_factor)
    else:
        filtered = acf(ScoreTensor(sample.scores), model.cfg.acf_kernel)
        f_s = ssrm_forward(filtered, model.ssrm)
    return f_i, align_spatial(f_s, f_i.spatial)


def stage2_features(model: Model, sample: Sample) -> Stage2Features:
    f_i, f_s = branch_features(model, sample)
    x_rgb, x_spa = aggregate_pair(f_i, f_s, ScoreTensor(sample.scores),
                                  model.cfg.acf_kernel)
    merged = np.maximum(f_i.data, f_s.data)
    return Stage2Features(
        merged_pooled=merged.mean(axis=(0, 1)),
        ext_rgb=extend_with_global(x_rgb, f_i).data,
        ext_spa=extend_with_global(x_spa, f_s).data,
        label=sample.label)


def _stage2_logits(model: Model, feats: Stage2Features, variant: str,
                   mode: str, rng) -> Node:
    if variant == "merge_max":
        return head_logits(const(feats.merged_pooled), model.merge_head, mode, rng)
    f_o = gldm_node(feats.ext_rgb, feats.ext_spa, model.gldm,
                    with_decoder=(variant == "full"))
    return head_logits(f_o, model.head, mode, rng)


def train_stage2(samples: list[Sample], stage1_ckpts, cfg: RunConfig,
                 variant: str = "full", metrics: list | None = None) -> Checkpoint:
    """Freeze both backbones and train the requested head variant."""
    if variant not in _STAGE2_STREAMS:
        raise ConfigError(f"unknown stage-2 variant '{variant}'")
    if not samples:
        raise DataError("dataset is empty")
    if stage1_ckpts is None:
        raise ConfigError("stage-2 training requires the stage-1 checkpoints")
    ck_ssrm, ck_ifem = stage1_ckpts
    if ck_ssrm is None or ck_ifem is None:
        raise ConfigError("stage-2 training requires both stage-1 checkpoints")
    model = Model(cfg)
    load_params(model, [ck_ssrm, ck_ifem])
    model.freeze_backbones()

    cache = [stage2_features(model, s) for s in samples]
    params = model.stage2_params(variant)
    rng = RngState(cfg.seed).generator(_STAGE2_STREAMS[variant])
    for epoch in range(cfg.epochs_stage2):
        order = rng.permutation(len(cache))
        losses, preds, labels = [], [], []
        for start in range(0, len(order), cfg.batch_size):
            batch = [cache[i] for i in order[start : start + cfg.batch_size]]
            zero_grads(params)
            nodes = []
            for feats in batch:
                logits = _stage2_logits(model, feats, variant, "train", rng)
                preds.append(int(np.argmax(logits.value)))
                labels.append(feats.label)
                nodes.append(cross_entropy_node(logits, feats.label))
            loss = mean_of(nodes)
            backward(loss)
            alig_step(params, float(loss.value), cfg.eta_stage2)
            losses.append(float(loss.value))
        if metrics is not None:
            metrics.append(f"stage2_{variant}\t{epoch}\t{np.mean(losses):.9f}\t"
                           f"{top1_accuracy(preds, labels):.6f}")
    return make_checkpoint(model, 2, variant, cfg.epochs_stage2)


def predict(model: Model, sample: Sample, variant: str) -> int:
    logits = predict_logits(model, sample, variant)
    return int(np.argmax(logits))


def predict_logits(model: Model, sample: Sample, variant: str) -> np.ndarray:
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant '{variant}'")
    if variant == "baseline":
        f_i = (FeatureGrid(sample.feat_rgb, model.cfg.ifem_factor)
               if sample.feat_rgb is not None
               else ifem_forward(sample.image, model.ifem))
        return head_logits(const(f_i.data.mean(axis=(0, 1))), model.ifem_head).value
    if variant == "ssrm_head":
        filtered = acf(ScoreTensor(sample.scores), model.cfg.acf_kernel)
        f_s = (FeatureGrid(sample.feat_spa, model.cfg.ssrm_factor)
               if sample.feat_spa is not None else ssrm_forward(filtered, model.ssrm))
        return head_logits(const(f_s.data.mean(axis=(0, 1))), model.ssrm_head).value
    feats = stage2_features(model, sample)
    return _stage2_logits(model, feats, variant, "eval", None).value


def evaluate(model: Model, samples: list[Sample], variant: str) -> tuple[float, list[int]]:
    if not samples:
        raise DataError("dataset is empty")
    preds = [predict(model, s, variant) for s in samples]
    return top1_accuracy(preds, [s.label for s in samples]), preds


def ablation_suite(train_samples: list[Sample], test_samples: list[Sample],
                   cfg: RunConfig, metrics: list | None = None) -> list[tuple[str, float]]:
    """Train the four model variants and report their test accuracies in order.

    Rows: pooled image baseline, elementwise-max branch merge, attention
    encoders without the decoder, and the full encoder-decoder model.
    """
    ck_ssrm, ck_ifem = train_stage1(train_samples, cfg, metrics)
    rows = []

    baseline_model = Model(cfg)
    load_params(baseline_model, [ck_ifem])
    acc, _ = evaluate(baseline_model, test_samples, "baseline")
    rows.append(("baseline", acc))

    for name, variant in (("ssrm", "merge_max"), ("encoder", "no_decoder"),
                          ("decoder", "full")):
        ckpt = train_stage2(train_samples, (ck_ssrm, ck_ifem), cfg, variant, metrics)
        model = restore_model(ckpt)
        acc, _ = evaluate(model, test_samples, variant)
        rows.append((name, acc))
    return rows


def inspect_sample(model: Model, sample: Sample) -> dict:
    """Full-model forward exposing intermediate artifacts for the inspect CLI."""
    f_i, f_s = branch_features(model, sample)
    scores = ScoreTensor(sample.scores)
    x_rgb, x_spa = aggregate_pair(f_i, f_s, scores, model.cfg.acf_kernel)
    labels = downsample_labels(scores, model.cfg.acf_kernel, f_i.spatial)
    record = AttentionRecord()
    ext_rgb = extend_with_global(x_rgb, f_i).data
    ext_spa = extend_with_global(x_spa, f_s).data
    f_o = gldm_node(ext_rgb, ext_spa, model.gldm, with_decoder=True,
                    record=record).value
    logits = head_logits(const(f_o), model.head).value
    return {
        "seq_rgb": x_rgb.data,
        "seq_spa": x_spa.data,
        "ext_rgb": ext_rgb,
        "ext_spa": ext_spa,
        "label_map": labels.data,
        "attn_encoder_rgb": record.encoder_rgb[0],
        "attn_encoder_spa": record.encoder_spa[0],
        "attn_decoder": record.decoder[0],
        "global_feature": f_o,
        "logits": logits,
        "predicted": int(np.argmax(logits)),
    }
