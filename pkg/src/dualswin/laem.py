"""Gated cross-attention from lesion-branch queries to whole-image keys/values."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .backbone import TokenGrid


def stages_for_count(n: int) -> tuple[int, ...]:
    """Active stages when ``n`` modules are inserted, filling from the deepest stage back."""
    if not 0 <= n <= 4:
        raise ValueError(f"LAEM count must lie in 0..4, got {n}")
    return tuple(range(5 - n, 5))


@dataclass(frozen=True)
class MsLaemConfig:
    active_stages: tuple[int, ...] = (1, 2, 3, 4)

    @classmethod
    def from_count(cls, n: int) -> "MsLaemConfig":
        return cls(stages_for_count(n))


class LAEM(nn.Module):
    def __init__(self, dim: int, num_heads: int, out_proj: bool = True):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"{num_heads} heads do not divide width {dim}")
        self.dim, self.num_heads = dim, num_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim) if out_proj else nn.Identity()
        self.gate = nn.Parameter(torch.zeros(1))

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.view(b, n, self.num_heads, self.dim // self.num_heads).transpose(1, 2)

    def attend(self, whole: TokenGrid, lesion: TokenGrid) -> tuple[torch.Tensor, torch.Tensor]:
        """Return (z, weights). z: (B, N_lesion, C); weights: (B, heads, N_lesion, N_whole)."""
        if whole.channels != self.dim or lesion.channels != self.dim:
            raise ValueError(f"channel mismatch: whole {whole.channels}, lesion {lesion.channels}, module {self.dim}")
        q = self._heads(self.q_proj(lesion.tokens))
        k = self._heads(self.k_proj(whole.tokens))
        v = self._heads(self.v_proj(whole.tokens))
        scores = q @ k.transpose(-2, -1) / (self.dim // self.num_heads) ** 0.5
        scores = scores - scores.amax(dim=-1, keepdim=True)
        e = scores.exp()
        weights = e / e.sum(dim=-1, keepdim=True)
        z = (weights @ v).transpose(1, 2).reshape(lesion.tokens.shape[0], -1, self.dim)
        return self.out_proj(z), weights

    def forward(self, whole: TokenGrid, lesion: TokenGrid) -> TokenGrid:
        if (whole.grid_h, whole.grid_w) != (lesion.grid_h, lesion.grid_w):
            raise ValueError(f"branch grids differ: {whole.shape} vs {lesion.shape}")
        z, _ = self.attend(whole, lesion)
        return TokenGrid(whole.tokens + self.gate * z, whole.grid_h, whole.grid_w)


def cross_attend(whole: TokenGrid, lesion: TokenGrid, params: LAEM) -> torch.Tensor:
    return params.attend(whole, lesion)[0]


def enhance(whole: TokenGrid, lesion: TokenGrid, params: LAEM) -> TokenGrid:
    return params(whole, lesion)


@torch.no_grad()
def dump_attention(whole: TokenGrid, lesion: TokenGrid, params: LAEM, query_index: int | None = None,
                   sample: int = 0) -> np.ndarray:
    """Per-head attention of one lesion query over the whole grid, shape (heads, grid_h, grid_w).

    The default query is the centre token of the lesion grid.
    """
    _, w = params.attend(whole, lesion)
    if query_index is None:
        query_index = (lesion.grid_h // 2) * lesion.grid_w + lesion.grid_w // 2
    maps = w[sample, :, query_index, :]
    return maps.reshape(params.num_heads, whole.grid_h, whole.grid_w).cpu().numpy()
