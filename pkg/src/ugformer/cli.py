"""Command-line entry point.

Subcommands: synth, train, predict, two-stage, eval, ablate, gradcheck.
Exit codes: 0 success, 1 usage/config error, 2 data error, 3 verification
failure. Every output directory gets a run.json with the seed and the full
resolved configuration, and reruns with identical inputs are bit-identical.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import gradcheck as gradcheck_mod
from .config import ModelConfig, TrainConfig, config_to_dict, load_config_file
from .errors import (AllBlackImage, BadMagic, BadSplit, ConfigError,
                     EmptyDataset, EmptyMask, MissingFile, NonFiniteGradient,
                     RoiOutOfBounds, SpecOutOfBounds, TruncatedFile,
                     UGformerError, UnknownDtype, UsageError)
from .models import build_model, count_parameters
from .phantom import STYLES, PhantomSpec, generate_phantom
from .pipeline import (Roi, Sample, augment_sample, compute_roi, crop_to_roi,
                       resize_bilinear, resize_nearest, two_stage_predict)
from .tensorio import (load_checkpoint, load_dataset, overlay_mask,
                       save_checkpoint, save_dataset, write_jsonl, write_pgm,
                       write_tensor)
from .training import dice_score, evaluate_dice, train_loop

DATA_ERRORS = (MissingFile, BadSplit, BadMagic, TruncatedFile, UnknownDtype,
               EmptyDataset, EmptyMask, AllBlackImage, RoiOutOfBounds,
               SpecOutOfBounds, NonFiniteGradient)


class _Parser(argparse.ArgumentParser):
    def error(self, message):            # argparse would sys.exit(2)
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ugformer",
                     description="Two-stage cavity/scar segmentation toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--count", type=int, required=True, help="number of slices")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=224, help="canvas height and width")
    p.add_argument("--styles", default=",".join(STYLES),
                   help=f"comma list from {{{','.join(STYLES)}}}, cycled over slices")
    p.add_argument("--val-frac", type=float, default=0.2)
    p.add_argument("--test-frac", type=float, default=0.0)

    p = sub.add_parser("train", help="train one segmentation model")
    p.add_argument("--data", required=True, help="dataset manifest.jsonl")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="JSON file with model/train sections")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--target", choices=("la", "scar"), default="la")
    p.add_argument("--init-from", default=None, help="checkpoint to warm-start from")
    p.add_argument("--roi-from", default=None,
                   help="first-stage checkpoint whose predictions define scar ROIs "
                        "(default: ground-truth cavity masks)")
    p.add_argument("--patch-size", type=int, default=96)
    p.add_argument("--tolerance", type=int, default=30)
    p.add_argument("--augment", action="store_true",
                   help="add 4 rotated/shifted copies of every training slice")

    p = sub.add_parser("predict", help="run one checkpoint over a dataset split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="val", choices=("train", "val", "test"))
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--overlay", action="store_true", help="also write PGM previews")

    p = sub.add_parser("two-stage", help="cavity model -> ROI -> scar model")
    p.add_argument("--la-checkpoint", required=True)
    p.add_argument("--scar-checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="val", choices=("train", "val", "test"))
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--tolerance", type=int, default=30)
    p.add_argument("--patch-size", type=int, default=96)
    p.add_argument("--overlay", action="store_true", help="also write PGM previews")

    p = sub.add_parser("eval", help="Dice of a checkpoint per split and style")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--splits", default="train,val")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", default=None, help="optional directory for metrics.jsonl")

    p = sub.add_parser("ablate", help="8-row branch/bridge ablation study")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--blocks", default=",".join(gradcheck_mod.BLOCKS),
                   help="comma list of blocks (default: all)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="optional directory for report.jsonl")
    return parser


# --------------------------------------------------------------- utilities

def _write_run_json(out_dir: str, command: str, seed, resolved: dict):
    os.makedirs(out_dir, exist_ok=True)
    payload = {"command": command, "seed": seed, "resolved": resolved}
    with open(os.path.join(out_dir, "run.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)


def _load_configs(path, seed_override):
    if path is None:
        model_cfg, train_cfg = ModelConfig(), TrainConfig()
    else:
        model_cfg, train_cfg = load_config_file(path)
    if seed_override is not None:
        train_cfg = dataclasses.replace(train_cfg, seed=seed_override)
    return model_cfg, train_cfg


def _la_pairs(samples):
    return [(s.image, s.la_mask) for s in samples if s.la_mask is not None]


def _scar_pairs(samples, tolerance, patch_size, roi_model=None, threshold=0.5):
    """ROI-cropped (patch, mask) training pairs for the second stage.

    The ROI comes from the ground-truth cavity mask unless a first-stage
    model is supplied; slices with an empty cavity are skipped.
    """
    pairs = []
    skipped = 0
    for s in samples:
        if s.scar_mask is None:
            continue
        if roi_model is not None:
            from .pipeline import _predict_prob
            la = (_predict_prob(roi_model, s.image) > threshold).astype(np.uint8)
        else:
            la = s.la_mask
        if la is None or la.sum() == 0:
            skipped += 1
            continue
        roi = compute_roi(la, tolerance)
        patch = resize_bilinear(crop_to_roi(s.image[0], roi), patch_size, patch_size)
        mask = resize_nearest(crop_to_roi(s.scar_mask, roi), patch_size, patch_size)
        pairs.append((patch[None], mask))
    return pairs, skipped


def _pairs_for_target(samples, target, args, roi_model=None):
    if target == "la":
        return _la_pairs(samples), 0
    return _scar_pairs(samples, args.tolerance, args.patch_size, roi_model)


def _mean_std(values):
    if not values:
        return float("nan"), float("nan")
    return float(np.mean(values)), float(np.std(values))


# ------------------------------------------------------------- subcommands

def cmd_synth(args) -> int:
    styles = [s.strip() for s in args.styles.split(",") if s.strip()]
    for s in styles:
        if s not in STYLES:
            raise UsageError(f"unknown style {s!r}; choose from {', '.join(STYLES)}")
    if not styles:
        raise UsageError("--styles must name at least one style")
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    n_test = int(round(args.count * args.test_frac))
    n_val = int(round(args.count * args.val_frac))
    n_train = args.count - n_val - n_test
    if n_train < 0:
        raise UsageError("val/test fractions exceed 1.0")
    samples, splits = [], []
    for i in range(args.count):
        style = styles[i % len(styles)]
        spec = PhantomSpec.random(args.seed * 1_000_003 + i, args.size, args.size, style)
        samples.append(generate_phantom(spec))
        splits.append("train" if i < n_train else "val" if i < n_train + n_val else "test")
    resolved = {"count": args.count, "size": args.size, "styles": styles,
                "val_frac": args.val_frac, "test_frac": args.test_frac,
                "split_sizes": {"train": n_train, "val": n_val, "test": n_test}}
    manifest = save_dataset(samples, splits, args.out,
                            extra_meta={"command": "synth", "seed": args.seed,
                                        "resolved": resolved})
    _write_run_json(args.out, "synth", args.seed, resolved)
    print(f"wrote {args.count} slices ({n_train} train / {n_val} val / {n_test} test) "
          f"to {manifest}")
    return 0


def cmd_train(args) -> int:
    model_cfg, train_cfg = _load_configs(args.config, args.seed)
    data = load_dataset(args.data)
    train_samples, val_samples = data["train"], data["val"]
    if args.augment:
        augmented = []
        for i, s in enumerate(train_samples):
            rng = np.random.default_rng([train_cfg.seed, i])
            augmented.extend(augment_sample(s, rng))
        train_samples = train_samples + augmented

    roi_model = None
    if args.roi_from is not None:
        roi_model, _ = load_checkpoint(args.roi_from)
    train_pairs, skipped_tr = _pairs_for_target(train_samples, args.target, args, roi_model)
    val_pairs, skipped_val = _pairs_for_target(val_samples, args.target, args, roi_model)
    if skipped_tr or skipped_val:
        print(f"skipped {skipped_tr} train / {skipped_val} val slices without a cavity")

    model = build_model(model_cfg, seed=train_cfg.seed)
    if args.init_from is not None:
        init_model, _ = load_checkpoint(args.init_from)
        model.load_state_dict(init_model.state_dict())
    print(f"{model_cfg.arch}: {count_parameters(model)} parameters, "
          f"{len(train_pairs)} train / {len(val_pairs)} val pairs")

    def report(rec):
        print(f"epoch {rec.epoch:3d}  train_loss={rec.train_loss:.4f}  "
              f"val_dice={rec.val_dice:.4f}  lr={rec.lr:.2e}")

    result = train_loop(model, train_pairs, val_pairs, train_cfg, on_epoch=report)

    os.makedirs(args.out, exist_ok=True)
    write_jsonl([r.as_dict() for r in result.history],
                os.path.join(args.out, "history.jsonl"))
    save_checkpoint(os.path.join(args.out, "checkpoint"), model, model_cfg,
                    seed=train_cfg.seed, train_config=train_cfg,
                    extra={"target": args.target})
    resolved = dict(config_to_dict(model_cfg, train_cfg), target=args.target,
                    augment=args.augment, patch_size=args.patch_size,
                    tolerance=args.tolerance, init_from=args.init_from,
                    roi_from=args.roi_from, data=os.path.abspath(args.data))
    _write_run_json(args.out, "train", train_cfg.seed, resolved)
    print(f"best val_dice {result.best_dice:.4f} after {train_cfg.epochs} epochs; "
          f"checkpoint in {os.path.join(args.out, 'checkpoint')}")
    return 0


def cmd_predict(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    data = load_dataset(args.data)
    samples = data[args.split]
    if not samples:
        raise EmptyDataset(f"split {args.split!r} is empty")
    os.makedirs(os.path.join(args.out, "masks"), exist_ok=True)
    records = []
    import torch

    for i, s in enumerate(samples):
        with torch.no_grad():
            x = torch.from_numpy(np.ascontiguousarray(s.image[None], dtype=np.float32))
            prob = torch.sigmoid(model(x))[0, 0].numpy()
        mask = (prob > args.threshold).astype(np.uint8)
        rel = f"masks/pred_{i:04d}.ugt"
        write_tensor(mask, os.path.join(args.out, rel))
        rec = {"id": i, "mask": rel, "style": s.meta.get("style"),
               "foreground": int(mask.sum())}
        target = meta.get("target", "la")
        gt = s.la_mask if target == "la" else s.scar_mask
        if gt is not None:
            rec["dice"] = dice_score(mask, gt)
        if args.overlay:
            write_pgm(overlay_mask(s.image, mask),
                      os.path.join(args.out, f"masks/pred_{i:04d}.pgm"))
        records.append(rec)
    write_jsonl(records, os.path.join(args.out, "predictions.jsonl"))
    resolved = {"checkpoint": os.path.abspath(args.checkpoint), "split": args.split,
                "threshold": args.threshold, "model_config": meta["model_config"]}
    _write_run_json(args.out, "predict", meta.get("seed"), resolved)
    scored = [r["dice"] for r in records if "dice" in r]
    if scored:
        mean, std = _mean_std(scored)
        print(f"{len(records)} predictions, dice {mean:.4f} +/- {std:.4f}")
    else:
        print(f"{len(records)} predictions (no ground truth in split)")
    return 0


def cmd_two_stage(args) -> int:
    la_model, la_meta = load_checkpoint(args.la_checkpoint)
    scar_model, _ = load_checkpoint(args.scar_checkpoint)
    data = load_dataset(args.data)
    samples = data[args.split]
    if not samples:
        raise EmptyDataset(f"split {args.split!r} is empty")
    os.makedirs(os.path.join(args.out, "panels"), exist_ok=True)
    records = []
    empty = 0
    for i, s in enumerate(samples):
        res = two_stage_predict(s.image, la_model, scar_model,
                                threshold=args.threshold, tolerance=args.tolerance,
                                patch_size=args.patch_size)
        stem = f"panels/{i:04d}"
        write_tensor(s.image.astype(np.float32), os.path.join(args.out, f"{stem}_input.ugt"))
        write_tensor(res.la_mask, os.path.join(args.out, f"{stem}_la.ugt"))
        write_tensor(res.scar_mask, os.path.join(args.out, f"{stem}_scar.ugt"))
        rec = {"id": i, "style": s.meta.get("style"), "empty_la": res.empty_la,
               "roi": None}
        if res.roi is not None:
            rec["roi"] = {"x_min": res.roi.x_min, "y_min": res.roi.y_min,
                          "x_max": res.roi.x_max, "y_max": res.roi.y_max,
                          "tolerance": res.roi.tolerance}
            write_tensor(res.patch.astype(np.float32),
                         os.path.join(args.out, f"{stem}_patch.ugt"))
        if args.overlay:
            write_pgm(s.image, os.path.join(args.out, f"{stem}_input.pgm"))
            write_pgm(overlay_mask(s.image, res.la_mask),
                      os.path.join(args.out, f"{stem}_la.pgm"))
            write_pgm(overlay_mask(s.image, res.scar_mask),
                      os.path.join(args.out, f"{stem}_scar.pgm"))
            if res.patch is not None:
                write_pgm(res.patch, os.path.join(args.out, f"{stem}_patch.pgm"))
        if s.la_mask is not None:
            rec["la_dice"] = dice_score(res.la_mask, s.la_mask)
        if s.scar_mask is not None:
            rec["scar_dice"] = dice_score(res.scar_mask, s.scar_mask)
        empty += int(res.empty_la)
        records.append(rec)
    write_jsonl(records, os.path.join(args.out, "two_stage.jsonl"))
    resolved = {"la_checkpoint": os.path.abspath(args.la_checkpoint),
                "scar_checkpoint": os.path.abspath(args.scar_checkpoint),
                "split": args.split, "threshold": args.threshold,
                "tolerance": args.tolerance, "patch_size": args.patch_size}
    _write_run_json(args.out, "two-stage", la_meta.get("seed"), resolved)
    la_mean, la_std = _mean_std([r["la_dice"] for r in records if "la_dice" in r])
    sc_mean, sc_std = _mean_std([r["scar_dice"] for r in records if "scar_dice" in r])
    print(f"{len(records)} slices  cavity dice {la_mean:.4f} +/- {la_std:.4f}  "
          f"scar dice {sc_mean:.4f} +/- {sc_std:.4f}  ({empty} empty first stage)")
    return 0


def cmd_eval(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    target = meta.get("target", "la")
    data = load_dataset(args.data)
    splits = [s.strip() for s in args.splits.split(",") if s.strip()]
    for s in splits:
        if s not in data:
            raise UsageError(f"unknown split {s!r}")
    rows = []

    class _PatchArgs:
        tolerance = 30
        patch_size = 96

    for split in splits:
        samples = data[split]
        if not samples:
            continue
        styles = sorted({s.meta.get("style") or "unknown" for s in samples})
        for style in styles + ["all"]:
            subset = samples if style == "all" else [
                s for s in samples if (s.meta.get("style") or "unknown") == style]
            pairs, _ = _pairs_for_target(subset, target, _PatchArgs())
            if not pairs:
                continue
            scores = evaluate_dice(model, pairs, threshold=args.threshold)
            mean, std = _mean_std(scores)
            rows.append({"split": split, "style": style, "n": len(scores),
                         "dice_mean": mean, "dice_std": std})
    print(f"target={target}")
    print(f"{'split':<8}{'style':<16}{'n':>4}  {'dice':>14}")
    for r in rows:
        print(f"{r['split']:<8}{r['style']:<16}{r['n']:>4}  "
              f"{r['dice_mean']:.4f} +/- {r['dice_std']:.4f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_jsonl(rows, os.path.join(args.out, "metrics.jsonl"))
        resolved = {"checkpoint": os.path.abspath(args.checkpoint),
                    "splits": splits, "threshold": args.threshold,
                    "target": target, "model_config": meta["model_config"]}
        _write_run_json(args.out, "eval", meta.get("seed"), resolved)
    return 0


ABLATION_ROWS = (
    # encoder branch grid: attention / deformable-conv toggles
    ("branch", {"arch": "ugformer", "use_mhsa": True, "use_dconv": False}),
    ("branch", {"arch": "ugformer", "use_mhsa": False, "use_dconv": True}),
    ("branch", {"arch": "ugformer", "use_mhsa": True, "use_dconv": True}),
    ("branch", {"arch": "unet"}),   # both branches off: plain conv encoder
    # bridge grid: backbone x graph bridge
    ("bridge", {"arch": "unet", "use_gcn": False}),
    ("bridge", {"arch": "unet", "use_gcn": True}),
    ("bridge", {"arch": "ugformer", "use_gcn": False}),
    ("bridge", {"arch": "ugformer", "use_gcn": True}),
)


def cmd_ablate(args) -> int:
    model_cfg, train_cfg = _load_configs(args.config, args.seed)
    data = load_dataset(args.data)
    train_pairs = _la_pairs(data["train"])
    val_pairs = _la_pairs(data["val"])
    rows = []
    for section, overrides in ABLATION_ROWS:
        cfg = dataclasses.replace(model_cfg, **overrides)
        model = build_model(cfg, seed=train_cfg.seed)
        result = train_loop(model, train_pairs, val_pairs, train_cfg)
        scores = evaluate_dice(model, val_pairs)
        mean, std = _mean_std(scores)
        row = {"section": section, "arch": cfg.arch,
               "mhsa": cfg.arch == "ugformer" and cfg.use_mhsa,
               "dconv": cfg.arch == "ugformer" and cfg.use_dconv,
               "gcn": cfg.use_gcn, "n": len(scores),
               "dice_mean": mean, "dice_std": std,
               "best_val_dice": result.best_dice}
        rows.append(row)
        print(f"[{section}] arch={row['arch']:<9} mhsa={str(row['mhsa']):<5} "
              f"dconv={str(row['dconv']):<5} gcn={str(row['gcn']):<5} "
              f"dice={mean:.4f} +/- {std:.4f}")
    os.makedirs(args.out, exist_ok=True)
    write_jsonl(rows, os.path.join(args.out, "ablation.jsonl"))
    resolved = dict(config_to_dict(model_cfg, train_cfg),
                    data=os.path.abspath(args.data),
                    rows=[{"section": s, **o} for s, o in ABLATION_ROWS])
    _write_run_json(args.out, "ablate", train_cfg.seed, resolved)
    print(f"{len(rows)} rows -> {os.path.join(args.out, 'ablation.jsonl')}")
    return 0


def cmd_gradcheck(args) -> int:
    blocks = [b.strip() for b in args.blocks.split(",") if b.strip()]
    for b in blocks:
        if b not in gradcheck_mod.BLOCKS:
            raise UsageError(f"unknown block {b!r}; choose from "
                             f"{', '.join(gradcheck_mod.BLOCKS)}")
    reports = gradcheck_mod.run_blocks(blocks, seed=args.seed)
    for rep in reports:
        print(rep.line())
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_jsonl([{"block": r.block, "passed": r.passed,
                      "max_rel_err": r.max_rel_err,
                      "params": [dataclasses.asdict(p) for p in r.params]}
                     for r in reports], os.path.join(args.out, "report.jsonl"))
        _write_run_json(args.out, "gradcheck", args.seed,
                        {"blocks": blocks, "tolerance": gradcheck_mod.TOLERANCE,
                         "step": gradcheck_mod.STEP})
    if not all(r.passed for r in reports):
        print("gradient check FAILED", file=sys.stderr)
        return 3
    print("all gradient checks passed")
    return 0


HANDLERS = {"synth": cmd_synth, "train": cmd_train, "predict": cmd_predict,
            "two-stage": cmd_two_stage, "eval": cmd_eval, "ablate": cmd_ablate,
            "gradcheck": cmd_gradcheck}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return 1
        return HANDLERS[args.command](args)
    except SystemExit as e:               # argparse --help
        return int(e.code or 0)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except DATA_ERRORS as e:
        print(f"data error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except UGformerError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
