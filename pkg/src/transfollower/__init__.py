"""Transformer car-following trajectory prediction with baselines, built on a small numpy autodiff."""

from .cf import (
    CFEvent,
    CFState,
    PredictionResult,
    build_decoder_input,
    build_encoder_input,
    cf_loss,
    rollout_spacing,
)
from .model import AttentionRecord, EncoderState, ModelConfig, TransFollower
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "AttentionRecord",
    "CFEvent",
    "CFState",
    "EncoderState",
    "ModelConfig",
    "PredictionResult",
    "Tensor",
    "TransFollower",
    "build_decoder_input",
    "build_encoder_input",
    "cf_loss",
    "rollout_spacing",
]
