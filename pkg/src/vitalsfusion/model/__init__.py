from .conv import conv3d_backward, conv3d_forward
from .network import (
    FusionMode,
    Heads,
    ModelConfig,
    ModelParams,
    Streams,
    backward,
    bvp_head_forward,
    encoder_forward,
    forward,
    fuse,
    init_params,
    model_forward,
    spo2_head_forward,
)
from .store import load_params, save_params

__all__ = [
    "FusionMode",
    "Heads",
    "ModelConfig",
    "ModelParams",
    "Streams",
    "backward",
    "bvp_head_forward",
    "conv3d_backward",
    "conv3d_forward",
    "encoder_forward",
    "forward",
    "fuse",
    "init_params",
    "load_params",
    "model_forward",
    "save_params",
    "spo2_head_forward",
]
