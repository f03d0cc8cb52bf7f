"""Residual-attention multi-image super-resolution for Proba-V-style satellite scenes."""

from .model import RAMS, ModelConfig, count_parameters, rams_forward
from .scene_io import Band, BandStats, SceneRecord, load_scene

__all__ = [
    "RAMS", "ModelConfig", "count_parameters", "rams_forward",
    "Band", "BandStats", "SceneRecord", "load_scene",
]
__version__ = "0.1.0"
