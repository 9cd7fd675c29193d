"""Accuracy, per-question exact match and F1, and robust accuracy under attack."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .adversarial import AdvConfig, Init, label_loss, project_linf
from .autodiff import Tensor
from .data import Dataset
from .model import EmbeddedBatch, ModelParams, TaskKind, TokenBatch, embed, forward_from_embeddings


def _aligned(*arrays):
    arrays = [np.asarray(a) for a in arrays]
    if len({len(a) for a in arrays}) != 1:
        raise ValueError(f"length mismatch: {[len(a) for a in arrays]}")
    return arrays


def accuracy(preds, labels) -> float:
    preds, labels = _aligned(preds, labels)
    if len(preds) == 0:
        raise ValueError("accuracy of an empty prediction set")
    return float(np.mean(preds == labels))


def _groups(group_ids):
    group_ids = np.asarray(group_ids)
    if group_ids.size == 0:
        raise ValueError("no groups to score")
    uniq, inverse = np.unique(group_ids, return_inverse=True)
    return uniq, inverse


def exact_match(preds, labels, group_ids) -> float:
    """Fraction of questions whose every candidate is labeled correctly."""
    preds, labels, group_ids = _aligned(preds, labels, group_ids)
    uniq, inverse = _groups(group_ids)
    wrong = np.zeros(len(uniq), dtype=bool)
    np.logical_or.at(wrong, inverse, preds != labels)
    return float(np.mean(~wrong))


def f1_overlap(preds, labels, group_ids) -> float:
    """Mean over questions of set-F1 between predicted and true plausible candidates.

    A question with no plausible candidate predicted or labeled scores 1; if
    only one of the two sets is empty it scores 0.
    """
    preds, labels, group_ids = _aligned(preds, labels, group_ids)
    uniq, inverse = _groups(group_ids)
    p = np.asarray(preds) == 1
    t = np.asarray(labels) == 1
    tp = np.bincount(inverse, weights=(p & t).astype(float), minlength=len(uniq))
    n_pred = np.bincount(inverse, weights=p.astype(float), minlength=len(uniq))
    n_true = np.bincount(inverse, weights=t.astype(float), minlength=len(uniq))
    denom = n_pred + n_true
    scores = np.where(denom == 0, 1.0, 2.0 * tp / np.where(denom == 0, 1.0, denom))
    return float(np.mean(scores))


@dataclass
class EvalReport:
    accuracy: float
    n_examples: int
    em: Optional[float] = None
    f1: Optional[float] = None
    robust_accuracy: Optional[float] = None
    attack_config: Optional[AdvConfig] = None

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "em": self.em,
            "f1": self.f1,
            "robust_accuracy": self.robust_accuracy,
            "n_examples": self.n_examples,
            "attack_config": None if self.attack_config is None else self.attack_config.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def default_attack(epsilon: float = 0.05) -> AdvConfig:
    """Evaluation attack: five steps of a quarter radius each."""
    return AdvConfig(epsilon=epsilon, step_size=epsilon / 4 if epsilon > 0 else None, steps=5)


def robust_predictions(params: ModelParams, batch: TokenBatch, attack: AdvConfig) -> np.ndarray:
    """Per-row correctness that survives every iterate of a label-loss sign attack.

    The attack starts at zero, so a row can only count if it is correct at
    the clean point and stays correct at each of the ``steps`` iterates.
    """
    if batch.labels is None:
        raise ValueError("robust accuracy needs labels")
    if attack.steps < 0:
        raise ValueError("attack steps must be >= 0")
    frozen = params.frozen()
    emb = embed(frozen, batch)
    emb = EmbeddedBatch(emb.embeddings.detach(), batch)
    delta = np.zeros(emb.shape)
    robust = forward_from_embeddings(frozen, emb).data.argmax(-1) == batch.labels
    if attack.epsilon == 0.0:
        return robust
    for _ in range(attack.steps):
        d = Tensor(delta, requires_grad=True)
        ad.backward(label_loss(frozen, emb, d))
        delta = project_linf(delta + attack.eta * np.sign(d.grad), attack.epsilon)
        pred = forward_from_embeddings(frozen, emb, delta).data.argmax(-1)
        robust &= pred == batch.labels
    return robust


def robust_accuracy(params: ModelParams, dataset, attack: AdvConfig) -> float:
    if attack.init is not Init.ZERO:
        attack = AdvConfig(**{**attack.to_dict(), "init": Init.ZERO, "norm_order": np.inf})
    batch = dataset.to_batch() if isinstance(dataset, Dataset) else dataset
    return float(np.mean(robust_predictions(params, batch, attack)))


def evaluate(params: ModelParams, dataset: Dataset, attack: Optional[AdvConfig] = None) -> EvalReport:
    batch = dataset.to_batch()
    logits = forward_from_embeddings(params.frozen(), embed(params.frozen(), batch))
    preds = logits.data.argmax(-1)
    report = EvalReport(accuracy=accuracy(preds, batch.labels), n_examples=len(dataset))
    if batch.task_kind is TaskKind.PAIRWISE:
        report.em = exact_match(preds, batch.labels, batch.group_ids)
        report.f1 = f1_overlap(preds, batch.labels, batch.group_ids)
    if attack is not None:
        report.robust_accuracy = robust_accuracy(params, batch, attack)
        report.attack_config = attack
    return report
