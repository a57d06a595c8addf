from .feedforward import FeedForwardBaseline, FeedForwardConfig, nn_baseline_forward
from .ga import GAConfig, GAResult, calibrate_idm_ga, grid_search, run_ga
from .idm import (
    EventBatch,
    IDMParams,
    equilibrium_spacing,
    idm_acceleration,
    simulate_idm,
)
from .lstm import LSTMBaseline, LSTMConfig, lstm_baseline_forward, lstm_cell, lstm_layer

__all__ = [
    "EventBatch",
    "FeedForwardBaseline",
    "FeedForwardConfig",
    "GAConfig",
    "GAResult",
    "IDMParams",
    "LSTMBaseline",
    "LSTMConfig",
    "calibrate_idm_ga",
    "equilibrium_spacing",
    "grid_search",
    "idm_acceleration",
    "lstm_baseline_forward",
    "lstm_cell",
    "lstm_layer",
    "nn_baseline_forward",
    "run_ga",
    "simulate_idm",
]
