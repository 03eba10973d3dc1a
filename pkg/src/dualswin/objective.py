"""Loss terms: stage-wise auxiliary cross-entropy with doubling weights, fused-head loss, their sum."""
from __future__ import annotations

from dataclasses import dataclass, field

import torch

from .backbone import StageBundle, TokenGrid


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1e-3
    cag_enabled: bool = True

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")

    def stage_weights(self) -> tuple[float, float, float, float]:
        return tuple((2 ** (i - 1)) * self.alpha for i in range(1, 5))


def cross_entropy(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Per-sample ``-log softmax(logits)[label]`` for logits of shape (B, K)."""
    labels = torch.as_tensor(labels, device=logits.device).long().reshape(-1)
    k = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range for {k} classes")
    logits = logits.reshape(-1, k)
    lse = torch.logsumexp(logits, dim=-1)
    return lse - logits.gather(1, labels[:, None]).squeeze(1)


def cag_loss(stage_logits: list[torch.Tensor], labels: torch.Tensor,
             weights: LossWeights) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Weighted sum of the four stage losses (batch-mean CE each); returns (total, weighted terms)."""
    if len(stage_logits) != 4:
        raise ValueError(f"expected 4 stage logits, got {len(stage_logits)}")
    terms = [w * cross_entropy(lg, labels).mean() for w, lg in zip(weights.stage_weights(), stage_logits)]
    return terms[0] + terms[1] + terms[2] + terms[3], terms


@dataclass
class LossBreakdown:
    total: torch.Tensor
    cls: torch.Tensor
    cag_w: torch.Tensor
    cag_l: torch.Tensor
    per_stage_w: list[torch.Tensor] = field(default_factory=list)
    per_stage_l: list[torch.Tensor] = field(default_factory=list)

    def record(self) -> dict:
        cls, w, l = (float(t.detach()) for t in (self.cls, self.cag_w, self.cag_l))
        return {
            "total": cls + w + l,
            "cls": cls,
            "cag_w": w,
            "cag_l": l,
            "per_stage_w": [float(t.detach()) for t in self.per_stage_w],
            "per_stage_l": [float(t.detach()) for t in self.per_stage_l],
        }


def total_loss(cls_logits: torch.Tensor, wib: StageBundle | None, lrb: StageBundle | None,
               labels: torch.Tensor, weights: LossWeights) -> LossBreakdown:
    cls = cross_entropy(cls_logits, labels).mean()
    zero = cls.new_zeros(())
    stage_zero = [zero] * 4
    cag_w, per_w = zero, stage_zero
    cag_l, per_l = zero, stage_zero
    if not weights.cag_enabled:
        return LossBreakdown(cls, cls, cag_w, cag_l, per_w, per_l)
    if wib is not None:
        cag_w, per_w = cag_loss(wib.stage_logits, labels, weights)
    if lrb is not None:
        cag_l, per_l = cag_loss(lrb.stage_logits, labels, weights)
    return LossBreakdown(cls + cag_w + cag_l, cls, cag_w, cag_l, per_w, per_l)


class FusionHead(torch.nn.Module):
    """Mean-pool each available final grid, concatenate, then a one-hidden-layer GELU MLP."""

    def __init__(self, in_dim: int, hidden: int, num_classes: int):
        super().__init__()
        self.fc1 = torch.nn.Linear(in_dim, hidden)
        self.act = torch.nn.GELU()
        self.fc2 = torch.nn.Linear(hidden, num_classes)

    @staticmethod
    def pool(*grids: TokenGrid | None) -> torch.Tensor:
        return torch.cat([g.tokens.mean(dim=1) for g in grids if g is not None], dim=-1)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.act(self.fc1(features)))


def classification_head(whole_final: TokenGrid | None, lesion_final: TokenGrid | None,
                        mlp: FusionHead) -> torch.Tensor:
    feats = FusionHead.pool(whole_final, lesion_final)
    if feats.shape[-1] != mlp.fc1.in_features:
        raise ValueError(f"pooled width {feats.shape[-1]} does not match head input {mlp.fc1.in_features}")
    return mlp(feats)
