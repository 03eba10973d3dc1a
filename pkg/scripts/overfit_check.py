"""Desk-scale sanity run: overfit a small synthetic set, then inspect Grad-CAM placement.

Trains a variant with the two-stage default schedule on a 64px dataset and prints train
accuracy, held-out macro-F1 and the fraction of lesioned training images whose CAM peak
sits inside the lesion box.

    python scripts/overfit_check.py --variant M5 --seed 0 --out runs/overfit
"""
from __future__ import annotations

import argparse
import time
from pathlib import Path

import numpy as np

from dualswin.checkpoint import load_checkpoint
from dualswin.config import ExperimentConfig, get_variant
from dualswin.engine import evaluate, prepare_data, train_two_stage
from dualswin.locator import extremal_points
from dualswin.report import grad_cam
from dualswin.synthdata import generate_synthetic


def cam_hits(ckpt: Path, split, tap: str) -> tuple[int, int]:
    model, _ = load_checkpoint(ckpt)
    hits = total = 0
    for i in np.flatnonzero(split.labels > 0):
        whole, lesion, labels = split.tensors([int(i)])
        peak = grad_cam(model, whole, lesion, int(labels[0]), tap).peak
        (x0, y0), (x1, y1) = extremal_points(split.masks[i])
        hits += x0 <= peak[0] <= x1 and y0 <= peak[1] <= y1
        total += 1
    return hits, total


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--variant", default="M5")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--per-class", type=int, default=20)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--epochs", type=int, nargs=2, metavar=("STAGE1", "STAGE2"))
    ap.add_argument("--out", default="runs/overfit")
    args = ap.parse_args()

    out = Path(args.out)
    data = generate_synthetic(args.per_class, args.size, args.data_seed, out / "data", val_per_class=10)
    exp = ExperimentConfig()
    exp.model.image_size = args.size
    if args.epochs:
        exp.stage1.epochs, exp.stage2.epochs = args.epochs
    prepared = prepare_data(exp, data)
    t0 = time.perf_counter()
    _, r2 = train_two_stage(exp, data, out / f"{args.variant}-s{args.seed}", args.variant, args.seed, prepared)
    elapsed = time.perf_counter() - t0
    train_rep = evaluate(r2.last, data, "train", prepared["train"])
    val_rep = evaluate(r2.best, data, "val", prepared["val"])
    print(f"{args.variant} seed {args.seed}: {elapsed:.0f}s, train acc {train_rep.accuracy:.3f}, "
          f"val macro-F1 {val_rep.macro_f1:.3f}")
    if get_variant(args.variant).wib:
        hits, total = cam_hits(r2.last, prepared["train"], "wib_stage4")
        print(f"  wib_stage4 CAM peak inside lesion box {hits}/{total} = {hits / total:.0%}")

if __name__ == "__main__":
    main()
