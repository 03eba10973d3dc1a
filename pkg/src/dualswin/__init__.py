"""Dual-branch lesion classifier: whole-image and lesion-crop hierarchical encoders fused by gated cross-attention."""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source checkout without install
    __version__ = "0.1.0"

from .config import BackboneConfig, ConfigError, ExperimentConfig, TrainConfig, VARIANTS  # noqa: E402
from .model import DualSwin  # noqa: E402

__all__ = ["BackboneConfig", "ConfigError", "DualSwin", "ExperimentConfig", "TrainConfig", "VARIANTS",
           "__version__"]
