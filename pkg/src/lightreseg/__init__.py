"""Lightweight retinal layer segmentation in NumPy.

A depthwise-separable U-shaped encoder, multi-scale asymmetric attention on the
skip connections and a transformer bottleneck, trained with hand-written
backward passes.
"""
from .checkpoint import load_checkpoint, save_checkpoint
from .config import MULTIPLIERS, VARIANTS, BottleneckConfig, EncoderConfig, ModelConfig
from .data import ClassPalette, LabeledSample, SyntheticConfig, decode_mask, encode_mask, generate_synthetic
from .errors import (CheckpointError, ConfigError, DataError, DimensionError, LightReSegError,
                     NonFiniteError, ShapeError)
from .estimator import LightReSegSegmenter
from .metrics import MetricsReport, confusion, metrics, wilcoxon_rank_sum
from .model import LightReSeg, build, param_breakdown, param_count
from .training import TrainConfig, lr_at, train_loop

__version__ = "0.1.0"

__all__ = [
    "BottleneckConfig", "CheckpointError", "ClassPalette", "ConfigError", "DataError",
    "DimensionError", "EncoderConfig", "LabeledSample", "LightReSeg", "LightReSegError",
    "LightReSegSegmenter", "MULTIPLIERS", "MetricsReport", "ModelConfig", "NonFiniteError",
    "ShapeError", "SyntheticConfig", "TrainConfig", "VARIANTS", "build", "confusion",
    "decode_mask", "encode_mask", "generate_synthetic", "load_checkpoint", "lr_at", "metrics",
    "param_breakdown", "param_count", "save_checkpoint", "train_loop", "wilcoxon_rank_sum",
]
