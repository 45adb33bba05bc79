"""Command-line entry point: train / evaluate / predict / augment-preview /
gradcheck.  Progress goes to stderr; data products go into the output dir."""

import argparse
import sys
from pathlib import Path

import numpy as np

from .augment import sample_params, apply_affine
from .data import (ClassPalette, DEFAULT_PALETTE, encode_mask, encode_prediction,
                   load_dataset, load_image, parse_run_config, save_png)
from .gradcheck import model_gradcheck, op_gradient_suite
from .layers import ResCRNet, build_network
from .train import evaluate, format_metric_table, predict, train

_EXTRA_COLORS = ((255, 255, 0), (255, 0, 255), (0, 255, 255), (255, 255, 255), (0, 0, 0),
                 (128, 128, 128), (255, 128, 0), (128, 0, 255))


def _default_palette(k):
    colors = [c for _, c in DEFAULT_PALETTE] + list(_EXTRA_COLORS)
    if k > len(colors):
        raise ValueError(f"no default palette for {k} classes; supply one via --config")
    return ClassPalette((f"class{i}", colors[i]) for i in range(k))


def _log(msg):
    print(msg, file=sys.stderr)


def _apply_overrides(rc, args):
    for attr in ("seed", "epochs", "steps_per_epoch", "output_dir"):
        val = getattr(args, attr, None)
        if val is not None:
            setattr(rc, attr, val)
    if getattr(args, "learning_rate", None) is not None:
        rc.optimizer.learning_rate = args.learning_rate


def _cmd_train(args):
    rc = parse_run_config(args.config)
    _apply_overrides(rc, args)
    if not rc.train_images or not rc.train_masks:
        raise ValueError(f"{args.config}: [data] train_images and train_masks are required")
    train_ds = load_dataset(rc.train_images, rc.train_masks, rc.palette)
    val_ds = None
    if rc.val_images and rc.val_masks:
        val_ds = load_dataset(rc.val_images, rc.val_masks, rc.palette)

    init_rng = np.random.default_rng(np.random.SeedSequence(rc.seed).spawn(3)[2])
    model = build_network(rc.network, rng=init_rng)
    run = train(model, train_ds, val_ds, rc, log=_log)

    # sample predictions from the final model
    out = Path(rc.output_dir) / "predictions"
    out.mkdir(parents=True, exist_ok=True)
    sample = val_ds if val_ds is not None else train_ds
    for image, _, ident in sample.items:
        probs = predict(model, image)
        save_png(out / f"{ident}_pred.png", encode_prediction(probs, rc.palette))
    _log(f"done: {len(run.records)} epochs, best epoch {run.best_epoch}, "
         f"checkpoints in {rc.output_dir}")
    return 0


def _cmd_evaluate(args):
    model = ResCRNet.load(args.checkpoint)
    if args.config:
        palette = parse_run_config(args.config).palette
    else:
        palette = _default_palette(model.cfg.num_classes)
    ds = load_dataset(args.images, args.masks, palette)
    result = evaluate(model, ds)
    print(format_metric_table(result, palette.names))
    print(f"mean_loss {result['loss']:.6f}  tanimoto {result['tanimoto']:.6f}  "
          f"soft_dice {result['soft_dice']:.6f}")
    return 0


def _cmd_predict(args):
    model = ResCRNet.load(args.checkpoint)
    if args.config:
        palette = parse_run_config(args.config).palette
    else:
        palette = _default_palette(model.cfg.num_classes)
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    images = sorted(p for p in Path(args.images).iterdir() if p.suffix.lower() == ".png")
    if not images:
        raise ValueError(f"{args.images}: no PNG images found")
    for path in images:
        probs = predict(model, load_image(path))
        save_png(out / f"{path.stem}_pred.png", encode_prediction(probs, palette))
        _log(f"predicted {path.name}")
    return 0


def _cmd_augment_preview(args):
    rc = parse_run_config(args.config)
    _apply_overrides(rc, args)
    ds = load_dataset(rc.train_images, rc.train_masks, rc.palette)
    out = Path(rc.output_dir) / "augment_preview"
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(rc.seed)
    pairs = ds.pairs()
    ids = ds.ids()
    for i in range(args.count):
        idx = i % len(pairs)
        p = sample_params(rc.augment, rng)
        image, mask = apply_affine(pairs[idx][0], pairs[idx][1], p)
        save_png(out / f"{i:03d}_{ids[idx]}_image.png", image)
        save_png(out / f"{i:03d}_{ids[idx]}_mask.png", encode_mask(mask, rc.palette))
    _log(f"wrote {args.count} augmented pairs to {out}")
    return 0


def _cmd_gradcheck(args):
    worst_op = 0.0
    results = op_gradient_suite(seeds=args.seeds)
    for name, err in sorted(results.items()):
        _log(f"{name}: {err:.3e}")
        worst_op = max(worst_op, err)
    net_err, worst_param = model_gradcheck(seed=args.seed)
    _log(f"end-to-end (worst parameter {worst_param}): {net_err:.3e}")
    overall = max(worst_op, net_err)
    print(f"max relative error {overall:.3e}")
    return 0 if overall < 1e-4 else 1


def build_parser():
    parser = argparse.ArgumentParser(prog="rescrnet",
                                     description="Res-CR-Net semantic segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="override [run] seed")
        p.add_argument("--output-dir", dest="output_dir", default=None,
                       help="override [run] output_dir")

    p = sub.add_parser("train", help="train a network from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--steps", dest="steps_per_epoch", type=int, default=None)
    p.add_argument("--lr", dest="learning_rate", type=float, default=None)
    common(p)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("evaluate", help="metric table for a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--config", default=None, help="run config (for the palette)")
    p.set_defaults(fn=_cmd_evaluate)

    p = sub.add_parser("predict", help="write color prediction masks for a directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--output-dir", dest="output_dir", default="predictions")
    p.add_argument("--config", default=None)
    p.set_defaults(fn=_cmd_predict)

    p = sub.add_parser("augment-preview", help="write augmented image/mask pairs")
    p.add_argument("--config", required=True)
    p.add_argument("--count", type=int, default=8)
    common(p)
    p.set_defaults(fn=_cmd_augment_preview)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=_cmd_gradcheck)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
