"""Hierarchical windowed-attention encoder shared by the whole-image and lesion branches."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import BackboneConfig


@dataclass
class TokenGrid:
    tokens: torch.Tensor  # (B, grid_h * grid_w, channels)
    grid_h: int
    grid_w: int

    def __post_init__(self):
        if self.tokens.shape[1] != self.grid_h * self.grid_w:
            raise ValueError(f"{self.tokens.shape[1]} tokens do not fill a {self.grid_h}x{self.grid_w} grid")

    @property
    def channels(self) -> int:
        return self.tokens.shape[-1]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.grid_h, self.grid_w, self.channels

    def as_map(self) -> torch.Tensor:
        return self.tokens.reshape(self.tokens.shape[0], self.grid_h, self.grid_w, self.channels)

    @classmethod
    def from_map(cls, x: torch.Tensor) -> "TokenGrid":
        b, h, w, c = x.shape
        return cls(x.reshape(b, h * w, c), h, w)


@dataclass
class StageBundle:
    embedding: TokenGrid
    grids: list[TokenGrid]  # raw stage outputs (what the stage heads read)
    stage_logits: list[torch.Tensor]
    enhanced: list[TokenGrid] = field(default_factory=list)  # what fed the next stage

    @property
    def final(self) -> TokenGrid:
        return self.enhanced[-1] if self.enhanced else self.grids[-1]


def _init_weights(m: nn.Module) -> None:
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


class PatchEmbed(nn.Module):
    """Non-overlapping P x P patches, each flattened (3 P^2 values) and projected to C."""

    def __init__(self, patch_size: int, embed_dim: int, in_chans: int = 3):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Conv2d(in_chans, embed_dim, kernel_size=patch_size, stride=patch_size)
        self.norm = nn.LayerNorm(embed_dim)

    def forward(self, images: torch.Tensor) -> TokenGrid:
        _, _, h, w = images.shape
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(f"image {h}x{w} not divisible by patch size {self.patch_size}")
        x = self.proj(images).permute(0, 2, 3, 1)
        return TokenGrid.from_map(self.norm(x))


def _relative_index(ws: int) -> torch.Tensor:
    coords = torch.stack(torch.meshgrid(torch.arange(ws), torch.arange(ws), indexing="ij")).flatten(1)
    rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (ws - 1)
    return rel[..., 0] * (2 * ws - 1) + rel[..., 1]


def _log_coords_table(ws: int) -> torch.Tensor:
    r = torch.arange(-(ws - 1), ws, dtype=torch.float32)
    table = torch.stack(torch.meshgrid(r, r, indexing="ij"), dim=-1)
    table = table / max(ws - 1, 1) * 8.0
    return torch.sign(table) * torch.log2(table.abs() + 1.0) / math.log2(8)


class WindowAttention(nn.Module):
    """Multi-head self-attention inside one window.

    ``cosine=True`` uses scaled cosine similarity with a learned per-head temperature
    and a log-spaced continuous position bias MLP; otherwise dot-product attention with
    a learned relative-position bias table.
    """

    def __init__(self, dim: int, window_size: int, num_heads: int, cosine: bool = True,
                 cpb_hidden: int = 512, drop: float = 0.0):
        super().__init__()
        self.dim, self.ws, self.num_heads, self.cosine = dim, window_size, num_heads, cosine
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.drop = nn.Dropout(drop)
        self.register_buffer("rel_index", _relative_index(window_size), persistent=False)
        if cosine:
            self.logit_scale = nn.Parameter(torch.log(10 * torch.ones(num_heads, 1, 1)))
            self.cpb_mlp = nn.Sequential(nn.Linear(2, cpb_hidden), nn.ReLU(inplace=True),
                                         nn.Linear(cpb_hidden, num_heads, bias=False))
            self.register_buffer("coords_table", _log_coords_table(window_size), persistent=False)
        else:
            self.bias_table = nn.Parameter(torch.zeros((2 * window_size - 1) ** 2, num_heads))
            nn.init.trunc_normal_(self.bias_table, std=0.02)

    def position_bias(self) -> torch.Tensor:
        n = self.ws * self.ws
        if self.cosine:
            table = self.cpb_mlp(self.coords_table.to(self.qkv.weight.dtype)).reshape(-1, self.num_heads)
            table = 16 * torch.sigmoid(table)
        else:
            table = self.bias_table
        return table[self.rel_index.reshape(-1)].reshape(n, n, -1).permute(2, 0, 1)

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        bw, n, c = x.shape
        qkv = self.qkv(x).reshape(bw, n, 3, self.num_heads, c // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        if self.cosine:
            attn = F.normalize(q, dim=-1) @ F.normalize(k, dim=-1).transpose(-2, -1)
            attn = attn * torch.clamp(self.logit_scale, max=math.log(100.0)).exp()
        else:
            attn = (q * (c // self.num_heads) ** -0.5) @ k.transpose(-2, -1)
        attn = attn + self.position_bias().unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(bw // nw, nw, self.num_heads, n, n) + mask[None, :, None]
            attn = attn.view(bw, self.num_heads, n, n)
        attn = self.drop(attn.softmax(dim=-1))
        out = (attn @ v).transpose(1, 2).reshape(bw, n, c)
        return self.drop(self.proj(out))


def window_partition(x: torch.Tensor, ws: int) -> torch.Tensor:
    b, h, w, c = x.shape
    x = x.view(b, h // ws, ws, w // ws, ws, c)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, c)


def window_reverse(windows: torch.Tensor, ws: int, h: int, w: int) -> torch.Tensor:
    b = windows.shape[0] // ((h // ws) * (w // ws))
    x = windows.view(b, h // ws, w // ws, ws, ws, -1)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, -1)


def attention_mask(h: int, w: int, ws: int, shift: int) -> torch.Tensor | None:
    """Additive mask over the padded grid: blocks cross-region pairs (shift) and padding keys."""
    hp, wp = math.ceil(h / ws) * ws, math.ceil(w / ws) * ws
    if shift == 0 and hp == h and wp == w:
        return None
    region = torch.zeros(1, hp, wp, 1)
    if shift:
        cnt = 0
        for hs in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
            for wsl in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
                region[:, hs, wsl, :] = cnt
                cnt += 1
    pad = torch.zeros(1, hp, wp, 1)
    pad[:, h:, :, :] = 1
    pad[:, :, w:, :] = 1
    if shift:
        pad = torch.roll(pad, shifts=(-shift, -shift), dims=(1, 2))
    rw = window_partition(region, ws).squeeze(-1)
    pw = window_partition(pad, ws).squeeze(-1)
    mask = (rw[:, None, :] != rw[:, :, None]).float() * -1e4
    mask = mask + pw[:, None, :] * -1e4
    return mask


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int, drop: float = 0.0):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)
        self.drop = nn.Dropout(drop)

    def forward(self, x):
        return self.drop(self.fc2(self.drop(self.act(self.fc1(x)))))


class SwinBlock(nn.Module):
    def __init__(self, dim: int, num_heads: int, grid: int, window_size: int, shifted: bool,
                 cfg: BackboneConfig):
        super().__init__()
        ws = window_size
        if grid <= ws:
            ws, shifted = grid, False  # a single window already covers the grid
        self.ws = ws
        self.shift = ws // 2 if shifted else 0
        self.post_norm = cfg.block == "v2"
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, ws, num_heads, cosine=self.post_norm,
                                    cpb_hidden=cfg.cpb_hidden, drop=cfg.drop_rate)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, max(1, int(dim * cfg.mlp_ratio)), cfg.drop_rate)
        self._masks: dict[tuple[int, int], torch.Tensor | None] = {}

    def _mask(self, h: int, w: int, like: torch.Tensor):
        key = (h, w)
        if key not in self._masks:
            self._masks[key] = attention_mask(h, w, self.ws, self.shift)
        m = self._masks[key]
        return None if m is None else m.to(like.dtype)

    def _attend(self, x: torch.Tensor) -> torch.Tensor:
        b, h, w, c = x.shape
        ws = self.ws
        ph, pw = (-h) % ws, (-w) % ws
        if ph or pw:
            x = F.pad(x, (0, 0, 0, pw, 0, ph))
        hp, wp = h + ph, w + pw
        if self.shift:
            x = torch.roll(x, shifts=(-self.shift, -self.shift), dims=(1, 2))
        out = self.attn(window_partition(x, ws), self._mask(h, w, x))
        out = window_reverse(out, ws, hp, wp)
        if self.shift:
            out = torch.roll(out, shifts=(self.shift, self.shift), dims=(1, 2))
        return out[:, :h, :w, :].contiguous()

    def forward(self, grid: TokenGrid) -> TokenGrid:
        x = grid.as_map()
        if self.post_norm:
            x = x + self.norm1(self._attend(x))
            x = x + self.norm2(self.mlp(x))
        else:
            x = x + self._attend(self.norm1(x))
            x = x + self.mlp(self.norm2(x))
        return TokenGrid.from_map(x)


class PatchMerging(nn.Module):
    """Concatenate each 2x2 neighborhood (4c) and project to 2c, halving the grid."""

    def __init__(self, dim: int, post_norm: bool = True):
        super().__init__()
        self.post_norm = post_norm
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)
        self.norm = nn.LayerNorm(2 * dim if post_norm else 4 * dim)

    def forward(self, grid: TokenGrid) -> TokenGrid:
        x = grid.as_map()
        if grid.grid_h % 2 or grid.grid_w % 2:
            raise ValueError(f"cannot merge a {grid.grid_h}x{grid.grid_w} grid")
        x = torch.cat([x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]], dim=-1)
        x = self.norm(self.reduction(x)) if self.post_norm else self.reduction(self.norm(x))
        return TokenGrid.from_map(x)


class Stage(nn.Module):
    def __init__(self, index: int, cfg: BackboneConfig):
        super().__init__()
        i = index - 1
        self.index = index
        dim, grid = cfg.stage_in_dims()[i], cfg.stage_in_sizes()[i]
        self.in_dim, self.in_grid = dim, grid
        self.blocks = nn.ModuleList(
            SwinBlock(dim, cfg.heads[i], grid, cfg.window_size, shifted=bool(j % 2), cfg=cfg)
            for j in range(cfg.depths[i])
        )
        self.merge = PatchMerging(dim, post_norm=cfg.block == "v2") if index < 4 else None

    def forward(self, grid: TokenGrid) -> TokenGrid:
        if grid.channels != self.in_dim:
            raise ValueError(f"stage {self.index} expects {self.in_dim} channels, got {grid.channels}")
        for blk in self.blocks:
            grid = blk(grid)
        return self.merge(grid) if self.merge is not None else grid


class StageHead(nn.Module):
    """Mean-pool the grid and map to class logits."""

    def __init__(self, dim: int, num_classes: int):
        super().__init__()
        self.fc = nn.Linear(dim, num_classes)

    def forward(self, grid: TokenGrid) -> torch.Tensor:
        return self.fc(grid.tokens.mean(dim=1))


EnhanceFn = Callable[[int, TokenGrid], TokenGrid]


class SwinBranch(nn.Module):
    def __init__(self, cfg: BackboneConfig, with_heads: bool = True):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.patch_embed = PatchEmbed(cfg.patch_size, cfg.embed_dim)
        self.stages = nn.ModuleList(Stage(i, cfg) for i in range(1, 5))
        self.heads = nn.ModuleList(StageHead(d, cfg.num_classes) for d in cfg.stage_out_dims()) if with_heads else None
        self.apply(_init_weights)

    def forward(self, images: torch.Tensor, enhance: EnhanceFn | None = None) -> StageBundle:
        """``enhance(i, grid)`` replaces stage i's output before it feeds stage i+1.

        Stage heads always read the raw stage outputs.
        """
        emb = self.patch_embed(images)
        grid = emb
        grids, enhanced, logits = [], [], []
        for i, stage in enumerate(self.stages, start=1):
            raw = stage(grid)
            grids.append(raw)
            if self.heads is not None:
                logits.append(self.heads[i - 1](raw))
            grid = enhance(i, raw) if enhance is not None else raw
            enhanced.append(grid)
        return StageBundle(emb, grids, logits, enhanced)


def patch_embed(images: torch.Tensor, module: PatchEmbed) -> TokenGrid:
    return module(images)


def run_stage(grid: TokenGrid, stage: Stage) -> TokenGrid:
    return stage(grid)


def stage_head(grid: TokenGrid, head: StageHead) -> torch.Tensor:
    return head(grid)
