import numpy as np
import pytest
import torch

from dualswin.config import BackboneConfig, ExperimentConfig, TrainConfig
from dualswin.synthdata import generate_synthetic, split_manifest


def tiny_cfg(**kw) -> BackboneConfig:
    base = dict(image_size=32, patch_size=4, embed_dim=8, depths=[1, 1, 1, 1], heads=[1, 2, 2, 2],
                window_size=4, mlp_ratio=2.0, cpb_hidden=16)
    base.update(kw)
    return BackboneConfig(**base)


@pytest.fixture(scope="session")
def tiny_data(tmp_path_factory):
    """6 train + 2 test per class at 32px, one val per class carved out of train."""
    out = tmp_path_factory.mktemp("tiny_data")
    m = generate_synthetic(6, 32, seed=5, out_dir=out, test_per_class=2)
    m = split_manifest(m, 0.2, seed=0)
    m.write(out / "manifest.jsonl")
    return m


@pytest.fixture
def tiny_exp(tiny_data) -> ExperimentConfig:
    exp = ExperimentConfig(model=tiny_cfg())
    exp.data.manifest = str(tiny_data.root / "manifest.jsonl")
    exp.stage1 = TrainConfig(stage="one", epochs=2, batch_size=8, warmup_epochs=1, base_lr=1e-3)
    exp.stage2 = TrainConfig(stage="two", epochs=1, batch_size=8, warmup_epochs=0, base_lr=1e-4,
                             weight_decay=1e-8, cag_enabled=True)
    return exp


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
