"""Linear-time video token pipeline: RWKV-style recurrence, sorted token
merging, and the tools to measure them."""

from .kernels import (
    BACKEND,
    DecayParams,
    KernelInputError,
    NumericalError,
    TimeMixInputs,
    WkvState,
    wkv_chunked,
    wkv_sequence,
    wkv_step,
)
from .merge import ScheduleError, plan_schedule, stome_layer
from .vision import ConfigError, EncoderConfig, VisionEncoder, encode_video, preset

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ConfigError",
    "DecayParams",
    "EncoderConfig",
    "KernelInputError",
    "NumericalError",
    "ScheduleError",
    "TimeMixInputs",
    "VisionEncoder",
    "WkvState",
    "encode_video",
    "plan_schedule",
    "preset",
    "stome_layer",
    "wkv_chunked",
    "wkv_sequence",
    "wkv_step",
]
