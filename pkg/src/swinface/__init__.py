"""Swin-Transformer multi-task face model: recognition plus 42 analysis outputs."""
from .config import RunConfig, canonical_config, load_config, tiny_config
from .model import SwinFace, build_model

__version__ = "0.1.0"
__all__ = ["RunConfig", "canonical_config", "load_config", "tiny_config", "SwinFace", "build_model"]
