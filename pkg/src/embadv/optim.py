"""Adam, warmup/linear-decay schedule, global-norm clipping and the epoch loop."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .adversarial import AdvConfig, StepRngs, objective_loss
from .data import Dataset
from .model import ModelParams, predict

RECIPE_LEARNING_RATES = (1e-5, 2e-5, 3e-5, 5e-5)
RECIPE_BATCH_SIZES = (16, 32, 64)
OBJECTIVE_NAMES = ("standard", "adv", "smart", "alice")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-5
    batch_size: int = 32
    max_epochs: int = 10
    warmup_ratio: float = 0.1
    clip_norm: float = 1.0
    dropout_rate: float = 0.1
    seed: int = 0
    objective: str = "standard"
    adv: AdvConfig = field(default_factory=AdvConfig)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-6

    def __post_init__(self):
        if isinstance(self.adv, dict):
            object.__setattr__(self, "adv", AdvConfig.from_dict(self.adv))
        if self.objective not in OBJECTIVE_NAMES:
            raise ValueError(f"objective must be one of {OBJECTIVE_NAMES}, got {self.objective!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be positive")
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ValueError("warmup_ratio must be in [0, 1]")
        if not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adv"] = self.adv.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class AdamState:
    first_moment: list
    second_moment: list
    step_count: int = 0

    @classmethod
    def zeros_like(cls, arrays: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], 0)


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear ramp from 0 to the base rate over the warmup fraction, then linear decay to 0."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    base = cfg.learning_rate
    warmup = cfg.warmup_ratio * total_steps
    if step < warmup:
        return base * step / warmup
    if warmup >= total_steps:
        return base
    return base * (total_steps - step) / (total_steps - warmup)


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads))


def clip_gradients(grads: Sequence[np.ndarray], clip_norm: float) -> list:
    norm = global_norm(grads)
    if norm > clip_norm:
        scale = clip_norm / norm
        return [g * scale for g in grads]
    return list(grads)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-6):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    if not (len(params) == len(grads) == len(state.first_moment)):
        raise ValueError("params, grads and moments must have the same length")
    t = state.step_count + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if not (p.shape == g.shape == m.shape == v.shape):
            raise ad.ShapeError(f"adam_step: shape mismatch {p.shape} vs {g.shape}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(new_m, new_v, t)


def accuracy_on(params: ModelParams, dataset: Dataset) -> float:
    batch = dataset.to_batch()
    return float(np.mean(predict(params, batch) == batch.labels))


def train(params: ModelParams, dataset: Dataset, cfg: TrainConfig,
          dev: Optional[Dataset] = None, log_fh=None):
    """Fit ``params`` on ``dataset`` with the configured objective.

    Returns the parameters from the epoch with the best dev accuracy (first
    one on ties) and the per-epoch log. ``dev`` defaults to the training set.
    When ``log_fh`` is given each epoch record is written to it as one JSON
    line.
    """
    if len(dataset) == 0:
        raise ValueError("training set is empty")
    dev = dataset if dev is None else dev
    params = params.with_dropout(cfg.dropout_rate).copy()
    n = len(dataset)
    per_epoch = math.ceil(n / cfg.batch_size)
    total = per_epoch * cfg.max_epochs
    state = AdamState.zeros_like(params.arrays())
    best_acc, best = -1.0, params
    log = []
    step = 0
    for epoch in range(cfg.max_epochs):
        order = np.random.default_rng([cfg.seed, epoch, 7]).permutation(n)
        sums = np.zeros(3)
        lr = 0.0
        for b in range(per_epoch):
            batch = dataset.to_batch(order[b * cfg.batch_size:(b + 1) * cfg.batch_size])
            rngs = StepRngs.from_seed(cfg.seed, step)
            params.zero_grad()
            loss, diag = objective_loss(cfg.objective, params, batch, cfg.adv,
                                        train_mode=True, rngs=rngs)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss {value} at epoch {epoch + 1}, batch {b}, step {step}"
                )
            ad.backward(loss)
            grads = clip_gradients(params.grads(), cfg.clip_norm)
            lr = lr_at(step, total, cfg)
            arrays, state = adam_step(params.arrays(), grads, state, lr,
                                      cfg.beta1, cfg.beta2, cfg.adam_eps)
            params = params.with_arrays(arrays)
            sums += (value, diag.label_term, diag.smooth_term)
            step += 1
        dev_acc = accuracy_on(params, dev)
        record = {
            "epoch": epoch + 1,
            "train_loss": sums[0] / per_epoch,
            "adv_term": sums[1] / per_epoch,
            "smooth_term": sums[2] / per_epoch,
            "dev_accuracy": dev_acc,
            "lr": lr,
        }
        log.append(record)
        if log_fh is not None:
            log_fh.write(json.dumps(record) + "\n")
        if dev_acc > best_acc:
            best_acc, best = dev_acc, params
    return best, log
