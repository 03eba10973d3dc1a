"""Command-line entry point: ``dualswin <command> ...``."""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, dump_experiment, load_experiment, parse_override

log = logging.getLogger("dualswin")

OUT_ENV = "DUALSWIN_OUT"


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


class Run:
    """A run directory holding exactly one ``run.json`` manifest."""

    def __init__(self, command: str, out_dir: Path, config_hash: str, seed: int, argv: Sequence[str]):
        self.dir = out_dir
        self.dir.mkdir(parents=True, exist_ok=True)
        self.record: dict[str, Any] = {
            "command": command,
            "config_hash": config_hash,
            "seed": seed,
            "code_version": __version__,
            "argv": list(argv),
            "outputs": [],
            "started": _now(),
            "finished": None,
        }
        self._write()

    def add(self, *paths) -> None:
        for p in paths:
            self.record["outputs"].append(str(p))

    def finish(self) -> None:
        self.record["finished"] = _now()
        self._write()

    def _write(self) -> None:
        (self.dir / "run.json").write_text(json.dumps(self.record, indent=2) + "\n")


def _out_root(args) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV, "runs"))


def _experiment(args) -> ExperimentConfig:
    overrides: dict[str, Any] = {}
    for item in getattr(args, "set", None) or []:
        k, v = parse_override(item)
        overrides[k] = v
    flag_map = {
        "manifest": "data.manifest",
        "segmenter": "data.segmenter",
        "mask_dir": "data.mask_dir",
        "variant": "variant",
        "alpha": "stage2.alpha",
        "laem_count": "laem_count",
    }
    for flag, key in flag_map.items():
        val = getattr(args, flag, None)
        if val is not None:
            overrides[key] = val
    if getattr(args, "seed", None) is not None:
        overrides["stage1.seed"] = overrides["stage2.seed"] = args.seed
        overrides["seeds"] = [args.seed]
    if getattr(args, "epochs", None) is not None:
        overrides[f"stage{getattr(args, 'stage', 1) or 1}.epochs"] = args.epochs
    return load_experiment(args.config, overrides)


def _manifest(path: str | None):
    from .synthdata import DatasetManifest

    if not path:
        raise ConfigError("data.manifest", "a dataset manifest is required")
    return DatasetManifest.read(path)


# --------------------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    from .synthdata import generate_synthetic, split_manifest

    out = Path(args.out)
    run = Run("gen-data", out, "-", args.seed, sys.argv[1:])
    manifest = generate_synthetic(args.per_class, args.size, args.seed, out, test_per_class=args.test_per_class)
    if args.val_fraction > 0:
        manifest = split_manifest(manifest, args.val_fraction, args.seed)
        manifest.write(out / "manifest.jsonl")
    run.add(out / "manifest.jsonl", out / "images", out / "masks")
    run.finish()
    counts = {s: len(manifest.split(s)) for s in ("train", "val", "test")}
    print(f"wrote {len(manifest.entries)} samples to {out} {counts}")
    return 0


def cmd_segment(args) -> int:
    from .locator import SegmenterKind, localize, mask_iou_dice
    from .synthdata import load_batch

    manifest = _manifest(args.manifest)
    seg = SegmenterKind(args.segmenter, args.mask_dir)
    out = _out_root(args) / f"segment-{args.segmenter}"
    run = Run("segment", out, "-", 0, sys.argv[1:])
    size = manifest.image_size or 0
    fallback = args.fallback_size or max(1, size // 2)
    rows, ious, dices = [], [], []
    for split in ("train", "val", "test"):
        entries = manifest.split(split)
        for i, sample in enumerate(load_batch(manifest, split, range(len(entries)))):
            loc = localize(sample, seg, fallback)
            row = {"image_id": sample.image_id, "split": split, "p1": loc.p1, "p2": loc.p2,
                   "used_fallback": loc.used_fallback}
            if args.report_iou and sample.mask is not None:
                iou, dice = mask_iou_dice(loc.mask, sample.mask)
                row.update(iou=iou, dice=dice)
                ious.append(iou)
                dices.append(dice)
            rows.append(row)
    with open(out / "localizations.jsonl", "w") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")
    run.add(out / "localizations.jsonl")
    if args.report_iou:
        summary = {"mean_iou": float(np.mean(ious)) if ious else None,
                   "mean_dice": float(np.mean(dices)) if dices else None, "n": len(ious)}
        (out / "segmentation.json").write_text(json.dumps(summary, indent=2) + "\n")
        run.add(out / "segmentation.json")
        print(json.dumps(summary))
    run.finish()
    print(f"localized {len(rows)} samples -> {out}")
    return 0


def _run_dir(args, exp: ExperimentConfig, tag: str, seed: int) -> Path:
    return _out_root(args) / f"{tag}-{exp.config_hash()}-s{seed}"


def cmd_train(args) -> int:
    from .config import get_variant
    from .engine import train

    exp = _experiment(args)
    stage_cfg = exp.stage1 if args.stage == 1 else exp.stage2
    variant = get_variant(exp.variant)
    init = args.init_ckpt
    if args.stage == 2 and init is None:
        raise ConfigError("init_ckpt", "stage 2 needs --init-ckpt pointing at the stage-1 checkpoint")
    if args.stage == 2:
        stage_cfg.cag_enabled = stage_cfg.cag_enabled and variant.cag
    out = _run_dir(args, exp, f"train-{variant.name}-stage{args.stage}", stage_cfg.seed)
    run = Run("train", out, exp.config_hash(), stage_cfg.seed, sys.argv[1:])
    dump_experiment(exp, out / "config.yaml")
    result = train(variant, stage_cfg, _manifest(exp.data.manifest), out, exp, init_checkpoint=init)
    run.add(out / "config.yaml", result.log_path, result.best, result.last)
    run.finish()
    print(f"checkpoint: {result.best}")
    return 0


def cmd_eval(args) -> int:
    from .checkpoint import read_meta
    from .engine import evaluate
    from .report import plot_confusion, write_report

    ckpt = Path(args.ckpt)
    manifest_path = args.manifest
    if manifest_path is None:
        cfg_file = ckpt.parent / "config.yaml"
        if cfg_file.exists():
            manifest_path = load_experiment(cfg_file).data.manifest
    meta = read_meta(ckpt)
    out = Path(args.out) if args.out else ckpt.parent / f"eval-{args.split}"
    run = Run("eval", out, "-", int(meta.get("seed", 0)), sys.argv[1:])
    report = evaluate(ckpt, _manifest(manifest_path), args.split)
    paths = write_report(report, out)
    paths.append(plot_confusion(report, out / "confusion.png"))
    run.add(*paths)
    run.finish()
    print(report.to_json())
    return 0


def cmd_ablate(args) -> int:
    from .engine import run_ablation

    exp = _experiment(args)
    out = _run_dir(args, exp, "ablate", exp.seeds[0])
    run = Run("ablate", out, exp.config_hash(), exp.seeds[0], sys.argv[1:])
    dump_experiment(exp, out / "config.yaml")
    run_ablation(exp, _manifest(exp.data.manifest), out)
    run.add(out / "config.yaml", out / "ablation.md", out / "ablation.csv", out / "ablation.jsonl")
    run.finish()
    print((out / "ablation.md").read_text())
    return 0


def cmd_sweep(args) -> int:
    from .engine import sweep_alpha, sweep_laem

    exp = _experiment(args)
    out = _run_dir(args, exp, f"sweep-{args.what}", exp.seeds[0])
    run = Run("sweep", out, exp.config_hash(), exp.seeds[0], sys.argv[1:])
    dump_experiment(exp, out / "config.yaml")
    fn = sweep_laem if args.what == "laem" else sweep_alpha
    fn(exp, _manifest(exp.data.manifest), out)
    name = f"sweep_{args.what}"
    run.add(out / "config.yaml", out / f"{name}.md", out / f"{name}.csv", out / f"{name}.jsonl")
    run.finish()
    print((out / f"{name}.md").read_text())
    return 0


def cmd_visualize(args) -> int:
    from .checkpoint import load_checkpoint
    from .engine import evaluate_model, predict, prepare_split
    from .laem import dump_attention
    from .locator import SegmenterKind
    from . import report as rp

    ckpt = Path(args.ckpt)
    model, meta = load_checkpoint(ckpt)
    manifest_path = args.manifest
    if manifest_path is None and (ckpt.parent / "config.yaml").exists():
        manifest_path = load_experiment(ckpt.parent / "config.yaml").data.manifest
    manifest = _manifest(manifest_path)
    seg = SegmenterKind(meta.get("segmenter", "oracle"), meta.get("mask_dir"))
    data = prepare_split(manifest, args.split, seg, meta["fallback_size"])
    if len(data) == 0:
        raise ValueError(f"split {args.split!r} is empty")
    out = Path(args.out) if args.out else ckpt.parent / f"viz-{args.what}-{args.split}"
    run = Run("visualize", out, "-", int(meta.get("seed", 0)), sys.argv[1:])
    idx = args.index if args.index is not None else range(min(len(data), args.count))
    idx = [idx] if isinstance(idx, int) else list(idx)
    if args.what == "gradcam":
        for i in idx:
            whole, lesion, labels = data.tensors([i])
            target = int(labels[0]) if args.target is None else args.target
            res = rp.grad_cam(model, whole, lesion, target, args.tap)
            base = data.pixels[i] if args.tap == "wib_stage4" else data.lesion_images()[i]
            p = rp.save_heatmap(res.overlay(base), out / f"{data.image_ids[i]}_cam.png")
            run.add(p)
    elif args.what == "attention":
        if not model.laems:
            raise ValueError("this checkpoint has no lesion-aware enhancement modules")
        stage = max(model.gates())
        sidecar = {}
        for i in idx:
            whole, lesion, _ = data.tensors([i])
            out_m = model(whole, lesion)
            maps = dump_attention(out_m.wib.grids[stage - 1], out_m.lrb.grids[stage - 1],
                                  model.laems[str(stage)])
            sidecar[data.image_ids[i]] = maps.tolist()
            for h, m in enumerate(maps):
                from .locator import resize_bilinear
                up = resize_bilinear(m / max(m.max(), 1e-12), *data.pixels[i].shape[:2])
                heat = rp.GradCamResult(up, m, (0, 0)).overlay(data.pixels[i])
                run.add(rp.save_heatmap(heat, out / f"{data.image_ids[i]}_stage{stage}_head{h}.png"))
        (out / "attention.json").write_text(json.dumps({"stage": stage, "weights": sidecar}) + "\n")
        run.add(out / "attention.json")
    elif args.what == "tsne":
        _, feats, _ = predict(model, data)
        coords = rp.tsne_embed(feats, seed=args.seed or 0)
        np.savetxt(out / "tsne.csv", np.column_stack([coords, data.labels]), delimiter=",",
                   header="x,y,label", comments="")
        run.add(out / "tsne.csv", rp.plot_embedding(coords, data.labels, out / "tsne.png"))
    else:
        rep = evaluate_model(model, data)
        run.add(rp.plot_confusion(rep, out / "confusion.png"))
    run.finish()
    print(f"wrote {len(run.record['outputs'])} file(s) to {out}")
    return 0


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualswin", description="Dual-branch lesion classifier toolkit")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--per-class", type=int, required=True)
    g.add_argument("--size", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--val-fraction", type=float, default=0.1)
    g.add_argument("--test-per-class", type=int, default=0)
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("segment", help="localize lesions and optionally score masks")
    s.add_argument("--manifest", required=True)
    s.add_argument("--segmenter", choices=["oracle", "precomputed", "center"], default="oracle")
    s.add_argument("--mask-dir")
    s.add_argument("--fallback-size", type=int)
    s.add_argument("--report-iou", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_segment)

    def common(sp, with_stage=False):
        sp.add_argument("--config")
        sp.add_argument("--manifest")
        sp.add_argument("--out")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--alpha", type=float)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="dotted config override, e.g. stage1.epochs=5")
        if with_stage:
            sp.add_argument("--epochs", type=int)

    t = sub.add_parser("train", help="train one stage of a variant")
    common(t, with_stage=True)
    t.add_argument("--variant", choices=["M1", "M2", "M3", "M4", "M5"])
    t.add_argument("--stage", type=int, choices=[1, 2], default=1)
    t.add_argument("--init-ckpt")
    t.add_argument("--laem-count", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--split", choices=["train", "val", "test"], default="test")
    e.add_argument("--manifest")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and evaluate variants M1..M5")
    common(a)
    a.set_defaults(func=cmd_ablate)

    w = sub.add_parser("sweep", help="LAEM-count or CAG-weight sweep")
    common(w)
    w.add_argument("--what", choices=["laem", "alpha"], required=True)
    w.set_defaults(func=cmd_sweep)

    v = sub.add_parser("visualize", help="Grad-CAM, attention maps, t-SNE or confusion figure")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--what", choices=["gradcam", "attention", "tsne", "confusion"], required=True)
    v.add_argument("--split", choices=["train", "val", "test"], default="test")
    v.add_argument("--manifest")
    v.add_argument("--index", type=int)
    v.add_argument("--count", type=int, default=8)
    v.add_argument("--target", type=int)
    v.add_argument("--tap", choices=["wib_stage4", "lrb_stage4"], default="wib_stage4")
    v.add_argument("--seed", type=int)
    v.add_argument("--out")
    v.set_defaults(func=cmd_visualize)
    return p


def dispatch(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        if getattr(args, "seed", None) is not None:
            np.random.seed(args.seed)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
