"""Two-stage training, evaluation, and the ablation / sweep runners."""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .config import AblationVariant, ExperimentConfig, TrainConfig, VARIANTS, get_variant
from .locator import SegmenterKind, center_box, crop_and_upsample, extremal_points, segment
from .model import DualSwin
from .objective import LossWeights, total_loss
from .report import MetricsReport, compute_metrics, confusion_from_pairs, render_table
from .synthdata import DatasetManifest, RandAugment, load_batch

log = logging.getLogger(__name__)


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warm-up from 0 to ``base_lr`` then cosine decay towards 0 at ``total_steps``."""
    warmup = int(round(cfg.warmup_epochs * total_steps / cfg.epochs))
    if step < warmup:
        return cfg.base_lr * step / warmup
    decay = max(total_steps - warmup, 1)
    return 0.5 * cfg.base_lr * (1.0 + math.cos(math.pi * (step - warmup) / decay))


def seed_everything(seed: int) -> None:
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


# --------------------------------------------------------------------------- data


@dataclass
class PreparedSplit:
    """Decoded samples of one split with their (fixed) lesion boxes."""

    pixels: list[np.ndarray]
    labels: np.ndarray
    boxes: list[tuple[tuple[int, int], tuple[int, int]]]
    used_fallback: list[bool]
    masks: list[np.ndarray | None]
    image_ids: list[str]
    _lesions: list[np.ndarray] | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.labels)

    def lesion_images(self) -> list[np.ndarray]:
        if self._lesions is None:
            self._lesions = [crop_and_upsample(p, *b) for p, b in zip(self.pixels, self.boxes)]
        return self._lesions

    def tensors(self, idx, augment: RandAugment | None = None, seed: int = 0):
        whole, lesion = [], []
        cached = self.lesion_images() if augment is None else None
        for i in idx:
            px = self.pixels[i]
            if augment is None:
                les = cached[i]
            else:
                px = augment(px, np.random.default_rng([seed, int(i)]))
                les = crop_and_upsample(px, *self.boxes[i])
            whole.append(px)
            lesion.append(les)
        to_t = lambda arr: torch.from_numpy(np.stack(arr).astype(np.float32)).permute(0, 3, 1, 2).contiguous()
        return to_t(whole), to_t(lesion), torch.from_numpy(self.labels[list(idx)])


def prepare_split(manifest: DatasetManifest, split: str, segmenter: SegmenterKind,
                  fallback_size: int) -> PreparedSplit:
    n = len(manifest.split(split))
    samples = load_batch(manifest, split, range(n))
    pixels, boxes, fb, masks = [], [], [], []
    for s in samples:
        mask = segment(s, segmenter)
        box = extremal_points(mask)
        fb.append(box is None)
        if box is None:
            h, w = s.pixels.shape[:2]
            box = center_box(h, w, fallback_size)
        pixels.append(s.pixels)
        boxes.append(box)
        masks.append(s.mask)
    labels = np.array([s.label for s in samples], dtype=np.int64)
    return PreparedSplit(pixels, labels, boxes, fb, masks, [s.image_id for s in samples])


def _segmenter(exp: ExperimentConfig) -> SegmenterKind:
    return SegmenterKind(exp.data.segmenter, exp.data.mask_dir)


# --------------------------------------------------------------------------- training


@dataclass
class TrainResult:
    out_dir: Path
    best: Path
    last: Path
    log_path: Path
    epochs: list[dict]
    final_record: dict


def _param_groups(model: torch.nn.Module, weight_decay: float):
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        # norms, biases, gates, temperatures and position-bias MLP inputs are not decayed
        (no_decay if p.ndim <= 1 or "logit_scale" in name or "bias_table" in name else decay).append(p)
    return [{"params": decay, "weight_decay": weight_decay}, {"params": no_decay, "weight_decay": 0.0}]


def check_variant_loss(variant: AblationVariant, cfg: TrainConfig) -> None:
    if not cfg.cag_enabled:
        return
    if variant.wib and variant.lrb and not variant.cag:
        raise ValueError(f"variant {variant.name} is defined without the auxiliary stage losses "
                         f"but cag_enabled=True")


def build_model(exp: ExperimentConfig, variant: AblationVariant) -> DualSwin:
    return DualSwin(exp.model, variant, laem_count=exp.laem_count, laem_out_proj=exp.laem_out_proj)


def predict(model: DualSwin, data: PreparedSplit, batch_size: int = 64):
    """Eval-mode forward over a split; returns (predictions, fused features, logits)."""
    model.eval()
    feats, logits = [], []
    with torch.no_grad():
        for start in range(0, len(data), batch_size):
            idx = range(start, min(start + batch_size, len(data)))
            whole, lesion, _ = data.tensors(idx)
            out = model(whole, lesion)
            logits.append(out.logits)
            feats.append(out.features)
    logits_t = torch.cat(logits)
    return logits_t.argmax(-1).numpy(), torch.cat(feats).numpy(), logits_t.numpy()


def evaluate_model(model: DualSwin, data: PreparedSplit) -> MetricsReport:
    if len(data) == 0:
        raise ValueError("cannot evaluate an empty split")
    preds, _, _ = predict(model, data)
    return compute_metrics(confusion_from_pairs(data.labels, preds, model.cfg.num_classes))


def train(variant: AblationVariant | str, cfg: TrainConfig, data: DatasetManifest, out_dir: str | Path,
          exp: ExperimentConfig | None = None, init_checkpoint: str | Path | None = None,
          prepared: dict[str, PreparedSplit] | None = None) -> TrainResult:
    """Train one stage; writes ``train_log.jsonl``, ``best.npz`` (val macro-F1) and ``last.npz``."""
    variant = get_variant(variant) if isinstance(variant, str) else variant
    exp = exp or ExperimentConfig()
    cfg.validate()
    check_variant_loss(variant, cfg)
    if cfg.stage == "two" and init_checkpoint is None:
        raise FileNotFoundError("stage two needs the stage-one checkpoint (init_checkpoint)")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    if prepared is None:
        prepared = prepare_data(exp, data)
    train_data, val_data = prepared["train"], prepared.get("val")
    if len(train_data) == 0:
        raise ValueError("empty train split")

    seed_everything(cfg.seed)
    if init_checkpoint is not None:
        model, meta = load_checkpoint(init_checkpoint)
        if meta["variant"] != variant.name:
            raise ValueError(f"checkpoint variant {meta['variant']} != {variant.name}")
    else:
        model = build_model(exp, variant)
    if data.image_size is not None and data.image_size != model.cfg.image_size:
        raise ValueError(f"data image size {data.image_size} != model image size {model.cfg.image_size}")

    opt = torch.optim.AdamW(_param_groups(model, cfg.weight_decay), lr=cfg.base_lr, betas=(0.9, 0.999))
    weights = LossWeights(alpha=cfg.alpha, cag_enabled=cfg.cag_enabled)
    augment = RandAugment(cfg.randaugment_n, cfg.randaugment_m) if cfg.augment else None
    n = len(train_data)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs

    log_path = out / "train_log.jsonl"
    best_path, last_path = out / "best.npz", out / "last.npz"
    meta = {"stage": cfg.stage, "seed": cfg.seed, "fallback_size": exp.fallback_size(),
            "segmenter": exp.data.segmenter, "mask_dir": exp.data.mask_dir}
    best_f1 = -1.0
    epochs, record = [], {}
    step = 0
    with open(log_path, "w") as logf:
        for epoch in range(cfg.epochs):
            model.train()
            perm = np.random.default_rng([cfg.seed, epoch]).permutation(n)
            sums: dict[str, float] = {}
            correct = 0
            for b in range(steps_per_epoch):
                idx = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                whole, lesion, labels = train_data.tensors(idx, augment, seed=cfg.seed * 100003 + epoch)
                lr = lr_at(step, total_steps, cfg)
                for g in opt.param_groups:
                    g["lr"] = lr
                out_m = model(whole, lesion)
                losses = total_loss(out_m.logits, out_m.wib, out_m.lrb, labels, weights)
                opt.zero_grad(set_to_none=True)
                losses.total.backward()
                if cfg.grad_clip is not None:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
                opt.step()
                record = {"kind": "step", "epoch": epoch, "step": step, "lr": lr, **losses.record()}
                logf.write(json.dumps(record) + "\n")
                for k in ("total", "cls", "cag_w", "cag_l"):
                    sums[k] = sums.get(k, 0.0) + record[k] * len(idx)
                correct += int((out_m.logits.argmax(-1) == labels).sum())
                step += 1
            ep = {"kind": "epoch", "epoch": epoch, **{k: v / n for k, v in sums.items()},
                  "train_acc_running": correct / n}
            if val_data is not None and len(val_data):
                rep = evaluate_model(model, val_data)
                ep["val_accuracy"], ep["val_macro_f1"] = rep.accuracy, rep.macro_f1
                if rep.macro_f1 > best_f1:
                    best_f1 = rep.macro_f1
                    save_checkpoint(best_path, model, {**meta, "epoch": epoch})
            logf.write(json.dumps(ep) + "\n")
            epochs.append(ep)
            log.info("epoch %d %s", epoch, ep)
    save_checkpoint(last_path, model, {**meta, "epoch": cfg.epochs - 1})
    if best_f1 < 0:
        save_checkpoint(best_path, model, {**meta, "epoch": cfg.epochs - 1})
    return TrainResult(out, best_path, last_path, log_path, epochs, record)


def prepare_data(exp: ExperimentConfig, data: DatasetManifest) -> dict[str, PreparedSplit]:
    seg = _segmenter(exp)
    return {s: prepare_split(data, s, seg, exp.fallback_size()) for s in ("train", "val", "test")}


def train_two_stage(exp: ExperimentConfig, data: DatasetManifest, out_dir: str | Path,
                    variant: AblationVariant | str | None = None, seed: int | None = None,
                    prepared: dict[str, PreparedSplit] | None = None,
                    stage_one: TrainResult | None = None) -> tuple[TrainResult, TrainResult]:
    """Stage one (fused loss only) then stage two from the last stage-one checkpoint.

    The auxiliary stage losses are switched on in stage two only for variants that carry them.
    """
    variant = get_variant(variant or exp.variant) if not isinstance(variant, AblationVariant) else variant
    out = Path(out_dir)
    prepared = prepared or prepare_data(exp, data)
    s1 = copy.deepcopy(exp.stage1)
    s2 = copy.deepcopy(exp.stage2)
    if seed is not None:
        s1.seed, s2.seed = seed, seed
    s2.cag_enabled = s2.cag_enabled and variant.cag
    r1 = stage_one or train(variant, s1, data, out / "stage1", exp, prepared=prepared)
    r2 = train(variant, s2, data, out / "stage2", exp, init_checkpoint=r1.last, prepared=prepared)
    return r1, r2


def evaluate(checkpoint: str | Path, data: DatasetManifest, split: str = "test",
             prepared: PreparedSplit | None = None) -> MetricsReport:
    model, meta = load_checkpoint(checkpoint)
    if data.image_size is not None and data.image_size != model.cfg.image_size:
        raise ValueError(f"checkpoint expects {model.cfg.image_size}px images, data has {data.image_size}px")
    if prepared is None:
        if not data.split(split):
            raise ValueError(f"split {split!r} has no samples")
        seg = SegmenterKind(meta.get("segmenter", "oracle"), meta.get("mask_dir"))
        prepared = prepare_split(data, split, seg, meta["fallback_size"])
    return evaluate_model(model, prepared)


def _eval_split(prepared: dict[str, PreparedSplit]) -> str:
    return "test" if len(prepared["test"]) else "val" if len(prepared["val"]) else "train"


def _mean_report(reports: list[MetricsReport]) -> MetricsReport:
    if len(reports) == 1:
        return reports[0]
    cm = np.sum([r.confusion for r in reports], axis=0)
    merged = compute_metrics(cm)
    # seed-averaged ratios, pooled confusion
    for k in ("accuracy", "macro_precision", "macro_recall", "macro_f1"):
        setattr(merged, k, float(np.mean([getattr(r, k) for r in reports])))
    for k in ("per_class_recall", "per_class_precision", "per_class_f1"):
        setattr(merged, k, np.mean([getattr(r, k) for r in reports], axis=0).tolist())
    return merged


def _write_table(rows: dict[str, MetricsReport], out: Path, name: str, title: str, key: str) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"{name}.jsonl", "w") as fh:
        for label, rep in rows.items():
            fh.write(json.dumps({key: label, **rep.row(), "confusion": rep.confusion, "n": rep.n}) + "\n")
    (out / f"{name}.md").write_text(render_table(rows, title, key))
    with open(out / f"{name}.csv", "w") as fh:
        cols = list(next(iter(rows.values())).row())
        fh.write(",".join([key] + cols) + "\n")
        for label, rep in rows.items():
            fh.write(",".join([label] + [repr(v) for v in rep.row().values()]) + "\n")
    return out / f"{name}.md"


def run_ablation(exp: ExperimentConfig, data: DatasetManifest, out_dir: str | Path,
                 variants: tuple[str, ...] = ("M1", "M2", "M3", "M4", "M5")) -> dict[str, MetricsReport]:
    out = Path(out_dir)
    prepared = prepare_data(exp, data)
    split = _eval_split(prepared)
    rows = {}
    for name in variants:
        reports = []
        for seed in exp.seeds:
            _, r2 = train_two_stage(exp, data, out / name / f"seed{seed}", VARIANTS[name], seed, prepared)
            reports.append(evaluate(r2.best, data, split, prepared[split]))
        rows[name] = _mean_report(reports)
    _write_table(rows, out, "ablation", f"Ablation ({split} split, macro averages)", "variant")
    return rows


def sweep_laem(exp: ExperimentConfig, data: DatasetManifest, out_dir: str | Path,
               n_values: list[int] | None = None) -> dict[str, MetricsReport]:
    out = Path(out_dir)
    prepared = prepare_data(exp, data)
    split = _eval_split(prepared)
    rows = {}
    for n in (n_values if n_values is not None else exp.laem_counts):
        run = copy.deepcopy(exp)
        run.laem_count = n
        reports = []
        for seed in exp.seeds:
            _, r2 = train_two_stage(run, data, out / f"laem{n}" / f"seed{seed}", "M5", seed, prepared)
            reports.append(evaluate(r2.best, data, split, prepared[split]))
        rows[str(n)] = _mean_report(reports)
    _write_table(rows, out, "sweep_laem", f"LAEM count sweep ({split} split)", "laem_count")
    return rows


def sweep_alpha(exp: ExperimentConfig, data: DatasetManifest, out_dir: str | Path,
                alphas: list[float] | None = None) -> dict[str, MetricsReport]:
    out = Path(out_dir)
    prepared = prepare_data(exp, data)
    split = _eval_split(prepared)
    rows: dict[str, list[MetricsReport]] = {}
    alphas = alphas if alphas is not None else exp.alphas
    for seed in exp.seeds:
        # stage one never sees alpha, so one stage-one run per seed serves every setting
        s1 = copy.deepcopy(exp.stage1)
        s1.seed = seed
        r1 = train("M5", s1, data, out / f"stage1_seed{seed}", exp, prepared=prepared)
        for a in alphas:
            run = copy.deepcopy(exp)
            run.stage2.alpha = a
            _, r2 = train_two_stage(run, data, out / f"alpha{a:g}" / f"seed{seed}", "M5", seed,
                                    prepared, stage_one=r1)
            rows.setdefault(f"{a:g}", []).append(evaluate(r2.best, data, split, prepared[split]))
    merged = {k: _mean_report(v) for k, v in rows.items()}
    _write_table(merged, out, "sweep_alpha", f"CAG weight sweep ({split} split)", "alpha")
    return merged
