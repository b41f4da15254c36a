#!/usr/bin/env python3
"""Desk-scale generalization run.

Trains the cavity model on phantoms drawn from the two "easy" styles only
(high_contrast, high_res), validates across all four styles, then trains the
scar model on ROI patches and reports the end-to-end two-stage scar Dice.
"""

import argparse
import json
import os
import time

import numpy as np
import torch

from ugformer import (ModelConfig, TrainConfig, build_model, dice_score,
                      phantom_set, roi_patch_pairs, two_stage_predict)
from ugformer.training import evaluate_dice, train_loop

TRAIN_STYLES = ("high_contrast", "high_res")
ALL_STYLES = ("high_contrast", "low_contrast", "high_res", "low_res")


def make_sets(n_train: int, n_val: int, size: int, seed: int):
    train = phantom_set(n_train, size, TRAIN_STYLES, base_seed=seed * 1_000_003)
    val = phantom_set(n_val, size, ALL_STYLES,
                      base_seed=seed * 1_000_003 + 500_000)
    return train, val


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n-train", type=int, default=128)
    ap.add_argument("--n-val", type=int, default=32)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--base-channels", type=int, default=16)
    ap.add_argument("--lr", type=float, default=0.08)
    ap.add_argument("--momentum", type=float, default=0.9)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--patch-size", type=int, default=96)
    ap.add_argument("--tolerance", type=int, default=30)
    ap.add_argument("--out", default=None, help="optional JSON summary path")
    args = ap.parse_args()

    torch.set_num_threads(max(1, torch.get_num_threads()))
    t0 = time.time()
    train, val = make_sets(args.n_train, args.n_val, args.size, args.seed)
    model_cfg = ModelConfig(base_channels=args.base_channels)
    train_cfg = TrainConfig(epochs=args.epochs, batch_size=8, initial_lr=args.lr,
                            momentum=args.momentum, decay_policy="plateau",
                            plateau_patience=10_000, seed=args.seed)

    print(f"-- cavity stage: {args.n_train} train ({'+'.join(TRAIN_STYLES)}), "
          f"{args.n_val} val (all styles), {args.epochs} epochs")
    la_model = build_model(model_cfg, seed=args.seed)
    la_pairs = [(s.image, s.la_mask) for s in train]
    val_pairs = [(s.image, s.la_mask) for s in val]
    train_loop(la_model, la_pairs, val_pairs, train_cfg,
               on_epoch=lambda r: print(f"  epoch {r.epoch:2d} loss={r.train_loss:.4f} "
                                        f"val_dice={r.val_dice:.4f}"))
    la_by_style = {}
    for style in ALL_STYLES:
        pairs = [(s.image, s.la_mask) for s in val if s.meta["style"] == style]
        la_by_style[style] = float(np.mean(evaluate_dice(la_model, pairs)))
    la_val = float(np.mean(evaluate_dice(la_model, val_pairs)))
    print(f"  cavity val dice {la_val:.4f}  " +
          "  ".join(f"{k}={v:.3f}" for k, v in la_by_style.items()))

    print(f"-- scar stage: ROI patches {args.patch_size}x{args.patch_size}")
    scar_model = build_model(model_cfg, seed=args.seed + 1)
    scar_train = roi_patch_pairs(train, args.tolerance, args.patch_size)
    scar_val = roi_patch_pairs(val, args.tolerance, args.patch_size)
    train_loop(scar_model, scar_train, scar_val, train_cfg,
               on_epoch=lambda r: print(f"  epoch {r.epoch:2d} loss={r.train_loss:.4f} "
                                        f"val_dice={r.val_dice:.4f}"))

    print("-- two-stage evaluation on the validation set")
    scar_scores, la_scores, empty = [], [], 0
    for s in val:
        res = two_stage_predict(s.image, la_model, scar_model,
                                tolerance=args.tolerance, patch_size=args.patch_size)
        la_scores.append(dice_score(res.la_mask, s.la_mask))
        scar_scores.append(dice_score(res.scar_mask, s.scar_mask))
        empty += int(res.empty_la)
    summary = {
        "la_val_dice": la_val,
        "la_by_style": la_by_style,
        "two_stage_la_dice": float(np.mean(la_scores)),
        "two_stage_scar_dice": float(np.mean(scar_scores)),
        "empty_first_stage": empty,
        "minutes": (time.time() - t0) / 60.0,
        "seed": args.seed,
        "n_train": args.n_train, "n_val": args.n_val, "size": args.size,
        "epochs": args.epochs, "lr": args.lr, "momentum": args.momentum,
    }
    print(f"two-stage cavity dice {summary['two_stage_la_dice']:.4f}, "
          f"scar dice {summary['two_stage_scar_dice']:.4f} "
          f"({empty} empty first stage), {summary['minutes']:.1f} min")
    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        with open(args.out, "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)


if __name__ == "__main__":
    main()
