"""Versioned checkpoint archive: ``.npz`` mapping parameter names to arrays plus a JSON meta record."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Any

import numpy as np
import torch

from .config import BackboneConfig, get_variant
from .model import DualSwin

FORMAT_VERSION = 1
_META_KEY = "__meta__"


def save_checkpoint(path: str | Path, model: DualSwin, meta: dict[str, Any]) -> Path:
    path = Path(path)
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    full_meta = {
        "format_version": FORMAT_VERSION,
        "model": {k: getattr(model.cfg, k) for k in model.cfg.__dataclass_fields__},
        "variant": model.variant.name,
        "laem_count": model.laem_count,
        "laem_out_proj": model.laem_out_proj,
        **meta,
    }
    arrays[_META_KEY] = np.array(json.dumps(full_meta, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def read_meta(path: str | Path) -> dict[str, Any]:
    with np.load(path, allow_pickle=False) as z:
        return json.loads(str(z[_META_KEY]))


def load_checkpoint(path: str | Path) -> tuple[DualSwin, dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(str(z[_META_KEY]))
        if meta.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {meta.get('format_version')}")
        state = {k: torch.from_numpy(np.array(z[k])) for k in z.files if k != _META_KEY}
    model = DualSwin(BackboneConfig(**meta["model"]), get_variant(meta["variant"]),
                     laem_count=meta["laem_count"],
                     laem_out_proj=meta.get("laem_out_proj", True))
    model.load_state_dict(state)
    return model, meta


def load_pretrained_branch(branch: torch.nn.Module, state: dict[str, torch.Tensor]) -> list[str]:
    """Optional hook for externally pretrained encoder weights; copies shape-matching tensors.

    Returns the names that were not loaded.
    """
    own = branch.state_dict()
    skipped = []
    for name, tensor in own.items():
        src = state.get(name)
        if src is not None and tuple(src.shape) == tuple(tensor.shape):
            own[name] = src.to(tensor.dtype)
        else:
            skipped.append(name)
    branch.load_state_dict(own)
    return skipped
