"""MultiPath network: trunk, foveal RoI heads with skip aggregation, integral classifiers."""

from .config import DEFAULT_FOVEAL, DEFAULT_THRESHOLDS, STAGE_STRIDES, ConfigError, ModelConfig, default_wiring
from .model import ForwardOutput, HeadScores, MultiPathNet, average_heads
from .roi import QUANTIZATION_MODES, roi_bins, roi_pool

__all__ = [
    "ConfigError", "DEFAULT_FOVEAL", "DEFAULT_THRESHOLDS", "ForwardOutput", "HeadScores",
    "ModelConfig", "MultiPathNet", "QUANTIZATION_MODES", "STAGE_STRIDES", "average_heads",
    "default_wiring", "roi_bins", "roi_pool",
]
