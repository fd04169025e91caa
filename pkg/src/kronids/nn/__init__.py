from .layers import (
    BatchNorm,
    Dense,
    Dropout,
    KronDense,
    KronFactors,
    Layer,
    Pad,
    ReLU,
    kron_backward,
    kron_forward,
)
from .model import Model, build_student, build_teacher, kron_shapes_for, teacher_param_count
from .serialize import deserialize, load_model, save_model, serialize

__all__ = [
    "BatchNorm",
    "Dense",
    "Dropout",
    "KronDense",
    "KronFactors",
    "Layer",
    "Model",
    "Pad",
    "ReLU",
    "build_student",
    "build_teacher",
    "deserialize",
    "kron_backward",
    "kron_forward",
    "kron_shapes_for",
    "load_model",
    "save_model",
    "serialize",
    "teacher_param_count",
]
