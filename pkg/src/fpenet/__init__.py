"""FPENet: feature pyramid encoding network for real-time semantic segmentation.

A numpy engine with a tape-based autodiff, the FPE/MEU building blocks, the
full network, a static cost model and a desk-scale training loop.
"""
from .config import ModelConfig, parse_config
from .graph import build, forward, predict

__all__ = ["ModelConfig", "build", "forward", "parse_config", "predict"]
__version__ = "0.1.0"
