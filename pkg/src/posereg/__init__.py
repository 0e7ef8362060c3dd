"""Pose regression with Soft-argmax on a small numpy autodiff engine."""
from .data import Annotation, SyntheticSpec, load_annotations, load_dataset, synth_generate
from .metrics import desk_config, evaluate, pck, pckh_config, pcp
from .model import ModelConfig, Pose, PoseModel, aggregate, predict, preset
from .softargmax import joint_probability, soft_argmax, spatial_softmax
from .tensor import Tensor
from .train import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Annotation", "ModelConfig", "Pose", "PoseModel", "SyntheticSpec", "Tensor", "TrainConfig",
    "aggregate", "desk_config", "evaluate", "joint_probability", "load_annotations", "load_dataset",
    "pck", "pckh_config", "pcp", "predict", "preset", "soft_argmax", "spatial_softmax", "synth_generate",
    "train",
]
