from vap.model.network import (
    ForwardOutput,
    LossTerms,
    ModelConfig,
    backward,
    check_weights,
    encode_features,
    forward,
    forward_from_encoded,
    init_weights,
    loss,
    param_shapes,
)
from vap.model.train import TrainingDiverged, TrainResult, train
from vap.model.weights_io import WeightsFileError, load_weights, save_weights

__all__ = [
    "ForwardOutput", "LossTerms", "ModelConfig", "TrainResult", "TrainingDiverged",
    "WeightsFileError", "backward", "check_weights", "encode_features", "forward",
    "forward_from_encoded", "init_weights", "load_weights", "loss", "param_shapes",
    "save_weights", "train",
]
