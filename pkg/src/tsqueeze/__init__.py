"""Temporal squeeze pooling as a differentiable least-squares layer, with a toy
video classifier, training harness and synthetic benchmark."""

from .errors import (
    ConfigError,
    DataError,
    NumericalError,
    ShapeError,
    SingularityError,
    StateError,
    TrainingDiverged,
    TSQError,
    TSQIOError,
)
from .grad import ParamSet, backprop, fd_check
from .network import LossBreakdown, NetworkConfig, TeSNet, fuse_streams, load_config
from .tspool import (
    Hyperplane,
    SqueezedClip,
    TSLayerParams,
    build_hyperplane,
    excitation,
    proj_loss,
    project_clip,
    squeeze_frames,
    ts_backward,
    ts_forward,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DataError", "NumericalError", "ShapeError", "SingularityError", "StateError",
    "TrainingDiverged", "TSQError", "TSQIOError",
    "ParamSet", "backprop", "fd_check",
    "LossBreakdown", "NetworkConfig", "TeSNet", "fuse_streams", "load_config",
    "Hyperplane", "SqueezedClip", "TSLayerParams", "build_hyperplane", "excitation", "proj_loss",
    "project_clip", "squeeze_frames", "ts_backward", "ts_forward",
]
