"""Joint trajectory imputation and next-location prediction on a small numpy autodiff core."""

from .config import RunConfig, load_config
from .data import MaskSpec, SynthProfile, TrajectoryWindow
from .model import Ingrain
from .params import ModelConfig, ModelParams, init_params
from .training import TrainConfig, evaluate, train

__all__ = [
    "Ingrain",
    "MaskSpec",
    "ModelConfig",
    "ModelParams",
    "RunConfig",
    "SynthProfile",
    "TrainConfig",
    "TrajectoryWindow",
    "evaluate",
    "init_params",
    "load_config",
    "train",
]
__version__ = "0.1.0"
