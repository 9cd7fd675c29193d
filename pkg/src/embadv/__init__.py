"""Embedding-space adversarial fine-tuning (Standard, ADV, SMART, ALICE) on a numpy autodiff core."""

from .adversarial import AdvConfig, Init, Objective, estimate_delta, label_loss, objective_loss, virtual_loss
from .autodiff import Tensor, backward, grad_check
from .data import Dataset, DatasetSpec, generate, kfold, load, save, split
from .estimator import AdversarialClassifier
from .metrics import EvalReport, accuracy, evaluate, exact_match, f1_overlap, robust_accuracy
from .model import ModelParams, TaskKind, init_params, load_checkpoint, save_checkpoint
from .optim import TrainConfig, adam_step, clip_gradients, lr_at, train

__version__ = "0.1.0"

__all__ = [
    "AdvConfig", "AdversarialClassifier", "Dataset", "DatasetSpec", "EvalReport", "Init",
    "ModelParams", "Objective", "TaskKind", "Tensor", "TrainConfig", "accuracy", "adam_step",
    "backward", "clip_gradients", "estimate_delta", "evaluate", "exact_match", "f1_overlap",
    "generate", "grad_check", "init_params", "kfold", "label_loss", "load", "load_checkpoint",
    "lr_at", "objective_loss", "robust_accuracy", "save", "save_checkpoint", "split", "train",
    "virtual_loss",
]
