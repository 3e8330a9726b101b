"""Modular recurrent networks with sparse module activation and bidirectional attention."""

__version__ = "0.1.0"

from .arch import (Architecture, LayerState, NetworkState, StepTrace, brims_step, count_parameters,
                   interlayer_read, layer_step, make_variant, matched_config, parameter_count, select_active,
                   select_mask, unroll)
from .config import BrimsConfig, ConfigError
from .tensor import Tensor, backward, finite_diff_check, no_grad

__all__ = [
    "Architecture", "BrimsConfig", "ConfigError", "LayerState", "NetworkState", "StepTrace", "Tensor",
    "backward", "brims_step", "count_parameters", "finite_diff_check", "interlayer_read", "layer_step",
    "make_variant", "matched_config", "no_grad", "parameter_count", "select_active", "select_mask", "unroll",
]
