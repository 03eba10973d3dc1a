"""Confusion-matrix metrics, Grad-CAM maps, t-SNE embeddings and their rendered outputs."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import CLASS_NAMES
from .locator import resize_bilinear

TABLE_COLUMNS = ("accuracy", "macro_precision", "macro_recall", "macro_f1",
                 "recall_normal", "recall_benign", "recall_malignant")


@dataclass
class MetricsReport:
    confusion: list[list[int]]  # rows = true class, columns = predicted
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    per_class_recall: list[float]
    per_class_precision: list[float]
    per_class_f1: list[float]
    n: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def row(self) -> dict[str, float]:
        r = self.per_class_recall
        return dict(zip(TABLE_COLUMNS, (self.accuracy, self.macro_precision, self.macro_recall,
                                        self.macro_f1, r[0], r[1], r[2])))


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def compute_metrics(confusion) -> MetricsReport:
    """One-vs-rest per-class precision/recall/F1, unweighted macro means; 0/0 counts as 0."""
    cm = np.asarray(confusion, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"confusion matrix must be square, got shape {cm.shape}")
    if (cm < 0).any():
        raise ValueError("confusion counts must be non-negative")
    n = int(cm.sum())
    if n == 0:
        raise ValueError("confusion matrix is empty")
    k = cm.shape[0]
    prec, rec, f1 = [], [], []
    for c in range(k):
        tp = int(cm[c, c])
        fp = int(cm[:, c].sum()) - tp
        fn = int(cm[c, :].sum()) - tp
        p, r = _ratio(tp, tp + fp), _ratio(tp, tp + fn)
        prec.append(p)
        rec.append(r)
        f1.append(_ratio(2 * p * r, p + r))
    return MetricsReport(
        confusion=cm.tolist(),
        accuracy=int(np.trace(cm)) / n,
        macro_precision=float(np.mean(prec)),
        macro_recall=float(np.mean(rec)),
        macro_f1=float(np.mean(f1)),
        per_class_recall=rec,
        per_class_precision=prec,
        per_class_f1=f1,
        n=n,
    )


def confusion_from_pairs(y_true: Sequence[int], y_pred: Sequence[int], num_classes: int = 3) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return cm


def render_table(rows: dict[str, MetricsReport], title: str = "", first: str = "Variant") -> str:
    """Markdown table: one row per run, overall (macro) metrics then per-class recall, in %."""
    header = [first, "Accuracy", "Precision (macro)", "Recall (macro)", "F1 (macro)",
              "Recall normal", "Recall benign", "Recall malignant"]
    lines = [f"### {title}" if title else "", "| " + " | ".join(header) + " |",
             "|" + "---|" * len(header)]
    for name, rep in rows.items():
        vals = [f"{100 * v:.2f}" for v in rep.row().values()]
        lines.append("| " + " | ".join([name] + vals) + " |")
    return "\n".join(line for line in lines if line) + "\n"


def write_report(report: MetricsReport, out_dir: str | Path, stem: str = "metrics") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    js = out / f"{stem}.json"
    js.write_text(report.to_json() + "\n")
    md = out / f"{stem}.md"
    md.write_text(render_table({stem: report}))
    return [js, md]


def _plt():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_confusion(report: MetricsReport, path: str | Path, class_names=CLASS_NAMES) -> Path:
    plt = _plt()
    cm = np.asarray(report.confusion)
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(cm, cmap="Blues")
    for i in range(cm.shape[0]):
        for j in range(cm.shape[1]):
            ax.text(j, i, str(cm[i, j]), ha="center", va="center")
    ax.set_xticks(range(len(class_names)), class_names)
    ax.set_yticks(range(len(class_names)), class_names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


# --------------------------------------------------------------------------- Grad-CAM


@dataclass
class GradCamResult:
    heatmap: np.ndarray  # H x W in [0, 1]
    coarse: np.ndarray  # grid_h x grid_w rectified map before upsampling
    peak: tuple[int, int]  # (x, y) pixel centre of the strongest grid cell

    def overlay(self, image: np.ndarray, strength: float = 0.5) -> np.ndarray:
        plt = _plt()
        heat = plt.get_cmap("jet")(self.heatmap)[..., :3]
        return np.clip((1 - strength) * image + strength * heat, 0.0, 1.0)


def grad_cam(model, whole: torch.Tensor, lesion: torch.Tensor, target_class: int,
             tap: str = "wib_stage4") -> GradCamResult:
    """Grad-CAM of the fused logit ``target_class`` over a branch's final token grid.

    ``whole`` and ``lesion`` hold a single image each, shape (1, 3, H, W).
    """
    if tap not in ("wib_stage4", "lrb_stage4"):
        raise ValueError(f"unknown tap {tap!r}")
    was_training = model.training
    model.eval()
    with torch.enable_grad():
        out = model(whole, lesion)
        bundle = out.wib if tap == "wib_stage4" else out.lrb
        if bundle is None:
            raise ValueError(f"tap {tap} is not available for variant {model.variant.name}")
        grid = bundle.final
        (grads,) = torch.autograd.grad(out.logits[0, target_class], grid.tokens)
    model.train(was_training)
    acts = grid.tokens[0].detach().double()
    g = grads[0].double()
    if not torch.isfinite(g).all():
        raise FloatingPointError("non-finite Grad-CAM gradients")
    weights = g.mean(dim=0)
    coarse = torch.relu(acts @ weights).reshape(grid.grid_h, grid.grid_w).numpy()
    h, w = whole.shape[-2:]
    up = resize_bilinear(coarse, h, w)
    lo, hi = up.min(), up.max()
    heat = (up - lo) / (hi - lo) if hi - lo > 1e-12 else np.zeros_like(up)
    r, c = np.unravel_index(int(np.argmax(coarse)), coarse.shape)
    peak = (int((c + 0.5) * w / grid.grid_w), int((r + 0.5) * h / grid.grid_h))
    return GradCamResult(heat.astype(np.float64), coarse, peak)


# --------------------------------------------------------------------------- t-SNE


def tsne_embed(features: np.ndarray, seed: int = 0, perplexity: float | None = None) -> np.ndarray:
    from sklearn.manifold import TSNE

    n = features.shape[0]
    if perplexity is None:
        perplexity = min(30.0, max(1.0, (n - 1) / 3.0))
    if n < 3 * perplexity:
        raise ValueError(f"t-SNE needs at least {3 * perplexity:g} samples, got {n}")
    tsne = TSNE(n_components=2, perplexity=perplexity, init="pca", random_state=seed)
    return tsne.fit_transform(np.asarray(features, dtype=np.float64))


def plot_embedding(coords: np.ndarray, labels: Sequence[int], path: str | Path,
                   class_names=CLASS_NAMES) -> Path:
    plt = _plt()
    labels = np.asarray(labels)
    fig, ax = plt.subplots(figsize=(4.5, 4))
    for c, name in enumerate(class_names):
        sel = labels == c
        ax.scatter(coords[sel, 0], coords[sel, 1], s=12, label=name)
    ax.legend(fontsize=8)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return Path(path)


def save_heatmap(image: np.ndarray, path: str | Path) -> Path:
    from PIL import Image

    arr = np.clip(np.rint(np.asarray(image) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)
    return Path(path)
