"""Attack model learners: canvas CNN, boosted trees, and softmax regression."""

from .gbt import GbtSpec
from .models import (
    CLASS_INDEX,
    CnnClassifier,
    CnnSpec,
    GbtClassifier,
    LogisticClassifier,
    LogisticSpec,
    cnn_forward,
    cnn_train,
    gbt_train,
    gradient_check,
    load_model,
    logistic_train,
    predict,
    save_model,
)
from .nn import TrainConfig

__all__ = [
    "CLASS_INDEX",
    "CnnSpec",
    "GbtSpec",
    "LogisticSpec",
    "TrainConfig",
    "CnnClassifier",
    "GbtClassifier",
    "LogisticClassifier",
    "cnn_train",
    "cnn_forward",
    "logistic_train",
    "gbt_train",
    "predict",
    "gradient_check",
    "save_model",
    "load_model",
]
