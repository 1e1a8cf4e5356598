"""``mimlab`` command-line entry point."""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .analysis import occlusion_invariance_curve, reconstruction_psnr
from .config import dump_config, resolve_config
from .data import gen_synthetic, load_dataset, save_packed
from .gradchecks import run_grad_checks
from .masking import sample_masks
from .storage import emit_curve, emit_metrics, load_checkpoint
from .training import finetune, linear_probe, pretrain, subsample_dataset


def _config_args(p: argparse.ArgumentParser, seed_required: bool = True) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted override, e.g. model.depth=2 (repeatable)")
    p.add_argument("--seed", type=int, required=seed_required)
    p.add_argument("--dataset", help="dataset path or synthetic:n=..,classes=.. descriptor (overrides the config)")


def _resolve(args, mode=None):
    overrides = list(args.overrides)
    if getattr(args, "dataset", None):
        overrides.append(f"dataset={args.dataset}")
    cfg = resolve_config(args.config, overrides, args.seed, mode)
    print(dump_config(cfg), flush=True)
    return cfg


def _progress(record: dict) -> None:
    shown = ", ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                      for k, v in record.items() if v is not None)
    print(shown, file=sys.stderr, flush=True)


def cmd_pretrain(args) -> int:
    cfg = _resolve(args)
    resume = load_checkpoint(args.resume) if args.resume else None
    ckpt, log = pretrain(cfg, resume=resume, checkpoint_path=args.out, on_epoch=_progress)
    if args.metrics:
        emit_metrics(log, args.metrics)
    return 0


def _labeled(cfg):
    return load_dataset(cfg.dataset, require_labels=True)


def cmd_finetune(args) -> int:
    cfg = _resolve(args, "supervised")
    ckpt = load_checkpoint(args.checkpoint) if args.checkpoint else None
    acc, log = finetune(ckpt, _labeled(cfg), cfg, on_epoch=_progress)
    if args.metrics:
        emit_metrics(log, args.metrics)
    print(json.dumps({"accuracy": acc}))
    return 0


def cmd_linear_probe(args) -> int:
    cfg = _resolve(args, "supervised")
    ckpt = load_checkpoint(args.checkpoint) if args.checkpoint else None
    print(json.dumps({"accuracy": linear_probe(ckpt, _labeled(cfg), cfg)}))
    return 0


def cmd_subsample(args) -> int:
    ds = load_dataset(args.dataset)
    sub = subsample_dataset(ds, args.strategy, args.n, args.seed)
    save_packed(sub, args.out)
    print(json.dumps({"n": len(sub), "class_histogram": sub.class_histogram(),
                      "fingerprint": sub.fingerprint()}))
    return 0


def cmd_analyze_cka(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.dataset)
    images = ds.images[:args.probe_size] if args.probe_size else ds.images
    ratios = [float(r) for r in args.ratios.split(",")]
    curve = occlusion_invariance_curve(ckpt.params, images, ratios, args.mode, args.seed)
    emit_curve(curve, args.out, args.svg)
    for i, block in enumerate(curve.blocks):
        print(f"block {block}: " + " ".join(f"{r:.2f}:{v:.4f}" for r, v in zip(ratios, curve.values[i])))
    return 0


def cmd_psnr(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.dataset)
    cfg = ckpt.params.config
    bits = sample_masks(len(ds), cfg.num_patches, args.mask_ratio, np.random.default_rng(args.seed))
    patch_norm = (ckpt.train_config or {}).get("patch_norm", True)
    print(json.dumps({"psnr_db": reconstruction_psnr(ckpt.params, ds.images, bits, patch_norm)}))
    return 0


def cmd_gen_synthetic(args) -> int:
    ds = gen_synthetic(args.n, args.classes, args.image_size, args.seed)
    save_packed(ds, args.out)
    print(json.dumps({"n": len(ds), "class_histogram": ds.class_histogram(), "fingerprint": ds.fingerprint()}))
    return 0


def cmd_grad_check(args) -> int:
    results = run_grad_checks(args.instances, args.seed, include=args.include)
    failed = False
    for name, err in results.items():
        ok = err < args.tol
        failed |= not ok
        print(f"{'ok  ' if ok else 'FAIL'} {name:32s} {err:.3e}")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mimlab", description="Desk-scale masked image modeling lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="MAE / R-MAE / C-MAE / supervised training")
    _config_args(p)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--metrics", help="per-epoch metrics CSV")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="end-to-end fine-tuning (omit --checkpoint to train from scratch)")
    _config_args(p)
    p.add_argument("--checkpoint")
    p.add_argument("--metrics")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("linear-probe", help="linear classifier on frozen features")
    _config_args(p)
    p.add_argument("--checkpoint")
    p.set_defaults(func=cmd_linear_probe)

    p = sub.add_parser("subsample", help="draw a few-image subset")
    p.add_argument("--dataset", required=True)
    p.add_argument("--strategy", choices=["in_one_class", "random", "one_per_class"], required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="packed binary output")
    p.set_defaults(func=cmd_subsample)

    p = sub.add_parser("analyze-cka", help="occlusion-invariance curve per block")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--ratios", default="0.0,0.25,0.5,0.75,0.9")
    p.add_argument("--probe-size", type=int, default=0)
    p.add_argument("--mode", choices=["drop_tokens", "mask_token"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="curve CSV")
    p.add_argument("--svg")
    p.set_defaults(func=cmd_analyze_cka)

    p = sub.add_parser("psnr", help="reconstruction PSNR of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--mask-ratio", type=float, default=0.75)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_psnr)

    p = sub.add_parser("gen-synthetic", help="write a synthetic shapes dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("grad-check", help="finite-difference checks of all ops and losses")
    p.add_argument("--instances", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--include", choices=["ops", "losses", "all"], default="all")
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"mimlab: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
