from .network import ModelSpec, Params, forward, gradients, init_params, predict, predict_proba
from .serialize import ModelFormatError, load_model, save_model
from .training import AdamState, EarlyStopping, TrainConfig, adam_step, evaluate, train

__all__ = [
    "AdamState",
    "EarlyStopping",
    "ModelFormatError",
    "ModelSpec",
    "Params",
    "TrainConfig",
    "adam_step",
    "evaluate",
    "forward",
    "gradients",
    "init_params",
    "load_model",
    "predict",
    "predict_proba",
    "save_model",
    "train",
]
