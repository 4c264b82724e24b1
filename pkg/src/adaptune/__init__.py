"""Adaptive training toolkit for small classifiers.

Reference models with hand-written backprop, LR estimation (range test,
grid, TPE), a plateau scheduler with early stopping, SAM, mutual learning
with an AM-Softmax partner, and an experiment CLI.
"""
from .kernels import BACKEND
from .modelcore import SeededRng, build_model, grad_check, load_weights, save_weights
from .control import ModelSpec, TrainLoopConfig, train
from .evaluation import aggregate, evaluate, mean_ap

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "SeededRng", "build_model", "grad_check", "load_weights", "save_weights",
    "ModelSpec", "TrainLoopConfig", "train", "aggregate", "evaluate", "mean_ap",
]
