"""Defocus-level prediction network written directly on numpy."""

from .network import (Architecture, DelpNet, backward, cross_entropy, cross_entropy_grad, forward,
                      predict, predict_proba, softmax)
from .training import Adam, TrainConfig, evaluate, fit, train_step

__all__ = [
    "Adam", "Architecture", "DelpNet", "TrainConfig", "backward", "cross_entropy",
    "cross_entropy_grad", "evaluate", "fit", "forward", "predict", "predict_proba", "softmax",
    "train_step",
]
