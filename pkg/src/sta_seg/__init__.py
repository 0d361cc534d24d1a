"""Spatio-temporal attention segmenter with temporal-consistency evaluation."""

from .segmenter import ModelConfig, Prediction, Segmenter, StageConfig, count_flops, forward_frame, forward_sequence
from .sta_core import STAConfig, TemporalCache

__all__ = [
    "ModelConfig",
    "Prediction",
    "STAConfig",
    "Segmenter",
    "StageConfig",
    "TemporalCache",
    "count_flops",
    "forward_frame",
    "forward_sequence",
]

__version__ = "0.1.0"
