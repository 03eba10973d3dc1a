"""The dual-branch classifier assembled for one ablation variant."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .backbone import StageBundle, SwinBranch, TokenGrid
from .config import AblationVariant, BackboneConfig, VARIANTS
from .laem import LAEM, stages_for_count
from .objective import FusionHead


@dataclass
class ModelOutput:
    logits: torch.Tensor
    features: torch.Tensor  # pooled, concatenated input of the fusion head
    wib: StageBundle | None
    lrb: StageBundle | None


class DualSwin(nn.Module):
    def __init__(self, cfg: BackboneConfig, variant: AblationVariant = VARIANTS["M5"],
                 laem_count: int = 4, laem_out_proj: bool = True):
        super().__init__()
        cfg.validate()
        self.cfg, self.variant = cfg, variant
        self.laem_count, self.laem_out_proj = laem_count, laem_out_proj
        self.wib = SwinBranch(cfg) if variant.wib else None
        self.lrb = SwinBranch(cfg) if variant.lrb else None
        if variant.ms_laem and not (variant.wib and variant.lrb):
            raise ValueError("lesion-aware enhancement needs both branches")
        self.active_stages = stages_for_count(laem_count) if variant.ms_laem else ()
        dims = cfg.stage_out_dims()
        self.laems = nn.ModuleDict({
            str(i): LAEM(dims[i - 1], cfg.heads[i - 1], out_proj=laem_out_proj) for i in self.active_stages
        })
        width = dims[-1]
        n_branches = int(variant.wib) + int(variant.lrb)
        self.head = FusionHead(width * n_branches, width, cfg.num_classes)

    def forward(self, whole: torch.Tensor | None, lesion: torch.Tensor | None,
                enhance: bool = True) -> ModelOutput:
        lrb = self.lrb(lesion) if self.lrb is not None else None
        wib = None
        if self.wib is not None:
            fn = None
            if enhance and len(self.laems) and lrb is not None:
                def fn(i: int, grid: TokenGrid) -> TokenGrid:
                    key = str(i)
                    return self.laems[key](grid, lrb.grids[i - 1]) if key in self.laems else grid
            wib = self.wib(whole, fn)
        whole_final = wib.final if wib is not None else None
        lesion_final = lrb.final if lrb is not None else None
        features = FusionHead.pool(whole_final, lesion_final)
        logits = self.head(features)
        return ModelOutput(logits, features, wib, lrb)

    def gates(self) -> dict[int, nn.Parameter]:
        return {int(k): m.gate for k, m in self.laems.items()}
