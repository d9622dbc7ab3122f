"""Command-line surface: gen-data, train, eval, grad-check, inspect, ablate.

Every run writes the resolved configuration next to its outputs so results
are self-describing. Errors exit nonzero with one machine-parsable line on
stderr: "error\t<kind>\t<message>".
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .checks import GRAD_TOL, module_grad_checks
from .errors import ConfigError, SpacoError
from .fileio import (Checkpoint, RunConfig, load_checkpoint, load_run_config,
                     read_manifest, read_tensor, save_checkpoint, write_tensor)
from .numerics import FLOAT, LABEL, STORAGE
from .scenes import SceneSpec, default_scene_spec, generate_dataset
from .training import (Model, Sample, ablation_suite, evaluate, inspect_sample,
                       load_params, load_samples, restore_model, train_stage1,
                       train_stage2)


def _write_text(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _load_config(path) -> RunConfig:
    if path is None:
        cfg = RunConfig()
        cfg.validate()
        return cfg
    return load_run_config(path)


def _check_manifest(cfg: RunConfig, manifest):
    if manifest.num_objects != cfg.objects:
        raise ConfigError(
            f"config key 'objects' is {cfg.objects} but the manifest declares "
            f"{manifest.num_objects}")
    if manifest.num_classes != cfg.classes:
        raise ConfigError(
            f"config key 'classes' is {cfg.classes} but the manifest declares "
            f"{manifest.num_classes}")


def cmd_gen_data(args) -> int:
    if args.spec:
        spec = SceneSpec.from_json(Path(args.spec).read_text())
    else:
        spec = default_scene_spec(seed=args.seed)
    out = Path(args.out)
    train_manifest, test_manifest = generate_dataset(spec, args.train, args.test, out)
    print(train_manifest)
    print(test_manifest)
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    manifest = read_manifest(args.manifest)
    _check_manifest(cfg, manifest)
    samples = load_samples(manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "run_config.txt", cfg.resolved_text())

    metrics: list[str] = []
    ck_ssrm, ck_ifem = train_stage1(samples, cfg, metrics)
    save_checkpoint(out / "stage1_ssrm.ckpt", ck_ssrm)
    save_checkpoint(out / "stage1_ifem.ckpt", ck_ifem)
    if args.stage == "all":
        ckpt = train_stage2(samples, (ck_ssrm, ck_ifem), cfg, args.variant, metrics)
        save_checkpoint(out / "model.ckpt", ckpt)
    _write_text(out / "metrics.tsv", "\n".join(metrics) + "\n")
    for line in metrics:
        print(line)
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = restore_model(ckpt)
    manifest = read_manifest(args.manifest)
    _check_manifest(model.cfg, manifest)
    samples = load_samples(manifest, feature_dir=args.feature_dir)
    variant = ckpt.header.get("variant", "full")
    accuracy, preds = evaluate(model, samples, variant)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "eval_config.txt", model.cfg.resolved_text())
    lines = [f"{i}\t{s.label}\t{p}" for i, (s, p) in enumerate(zip(samples, preds))]
    _write_text(out / "predictions.tsv", "\n".join(lines) + "\n")
    print(f"{accuracy:.6f}")
    return 0


def cmd_grad_check(args) -> int:
    if args.config:
        cfg = load_run_config(args.config)
        report = module_grad_checks(channels=cfg.channels, objects=cfg.objects,
                                    classes=cfg.classes, heads=cfg.heads,
                                    seed=cfg.seed)
    else:
        cfg = RunConfig(channels=16, objects=4, classes=3)
        report = module_grad_checks()
    lines = []
    ok = True
    for name, err in report.items():
        passed = err <= GRAD_TOL
        ok = ok and passed
        lines.append(f"{name}\t{err:.3e}\t{'PASS' if passed else 'FAIL'}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_text(out / "grad_check.tsv", "\n".join(lines) + "\n")
        _write_text(out / "grad_check_config.txt", cfg.resolved_text())
    for line in lines:
        print(line)
    return 0 if ok else 1


def cmd_inspect(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = restore_model(ckpt)
    image = read_tensor(args.image).astype(FLOAT)
    scores = read_tensor(args.scores).astype(FLOAT)
    sample = Sample(image, scores, label=0)
    artifacts = inspect_sample(model, sample)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "inspect_config.txt", model.cfg.resolved_text())
    for name, value in artifacts.items():
        if name == "predicted":
            continue
        array = np.asarray(value)
        dtype = LABEL if name == "label_map" else STORAGE
        write_tensor(out / f"{name}.spc", array.astype(dtype))
    print(artifacts["predicted"])
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    train_manifest = read_manifest(args.train_manifest)
    test_manifest = read_manifest(args.test_manifest)
    _check_manifest(cfg, train_manifest)
    _check_manifest(cfg, test_manifest)
    train_samples = load_samples(train_manifest)
    test_samples = load_samples(test_manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "run_config.txt", cfg.resolved_text())
    metrics: list[str] = []
    rows = ablation_suite(train_samples, test_samples, cfg, metrics)
    report = "\n".join(f"{name}\t{acc:.6f}" for name, acc in rows) + "\n"
    _write_text(out / "ablation.tsv", report)
    _write_text(out / "metrics.tsv", "\n".join(metrics) + "\n")
    print(report, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spaconet",
        description="Indoor-scene recognition pipeline on synthetic corpora")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic scene corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--spec", help="scene spec json; omit for the default corpus")
    p.add_argument("--seed", type=int, default=7, help="seed for the default spec")
    p.add_argument("--train", type=int, default=256)
    p.add_argument("--test", type=int, default=128)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="run the two training stages")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--stage", choices=("1", "all"), default="all")
    p.add_argument("--variant", choices=("merge_max", "no_decoder", "full"),
                   default="full")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--feature-dir", help="optional precomputed feature grids")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("grad-check", help="verify analytic gradients per module")
    p.add_argument("--config", help="use this config's dims; default is a small setup")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_grad_check)

    p = sub.add_parser("inspect", help="dump attention and sequence artifacts")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--scores", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("ablate", help="train and score the four model variants")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--test-manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except SpacoError as e:
        message = " ".join(str(e).split())
        print(f"error\t{type(e).__name__}\t{message}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
