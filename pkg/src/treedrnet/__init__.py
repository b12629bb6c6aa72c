"""TreeDRNet long-horizon forecasting on a small numpy autodiff core."""
from .model import ModelConfig, TreeDRNetModel, build_model, load_checkpoint, param_count, save_checkpoint
from .training import RunReport, TrainConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "TreeDRNetModel",
    "build_model",
    "load_checkpoint",
    "save_checkpoint",
    "param_count",
    "TrainConfig",
    "RunReport",
    "train",
    "evaluate",
]
