"""Trace-aware training and parallel decoding for masked diffusion LMs."""

from .model import ModelConfig, ModelParams, init_params
from .decoder import SamplerConfig, Trace, generate, acceleration_ratio
from .sft import SftConfig, TokenAccount
from .rl.policy import PolicyConfig, TraceRollout
from .rl.value import GaeConfig

__version__ = "0.1.0"

__all__ = [
    "ModelConfig", "ModelParams", "init_params",
    "SamplerConfig", "Trace", "generate", "acceleration_ratio",
    "SftConfig", "TokenAccount", "PolicyConfig", "TraceRollout", "GaeConfig",
    "__version__",
]
