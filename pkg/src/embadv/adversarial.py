"""Embedding-space perturbations and the adversarial training objectives.

Two ways of choosing the perturbation are supported: ascend the cross-entropy
against the true label, or ascend the KL divergence between the perturbed
prediction and the model's own clean prediction (a "virtual" label). The
combined objective adds the label term at one perturbation to ``alpha`` times
the smoothness term at another.

Perturbations are plain float arrays shaped like the embedded batch and are
kept inside an l-infinity ball of radius ``epsilon``.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import EmbeddedBatch, ModelParams, TokenBatch, embed, forward_from_embeddings


class Objective(str, enum.Enum):
    LABEL = "label"
    VIRTUAL = "virtual"


class Init(str, enum.Enum):
    ZERO = "zero"
    UNIFORM = "uniform"


@dataclass(frozen=True)
class AdvConfig:
    """Inner-maximization settings.

    ``step_size`` defaults to ``epsilon`` so that a single sign step from a
    zero start lands on a corner of the ball.
    """

    epsilon: float = 0.05
    step_size: Optional[float] = None
    steps: int = 1
    norm_order: float = math.inf
    alpha: float = 1.0
    init: Init = Init.ZERO

    def __post_init__(self):
        object.__setattr__(self, "init", Init(self.init))
        if self.norm_order != math.inf:
            raise ValueError(f"only the l-infinity ball is supported, got p={self.norm_order}")
        if not self.epsilon >= 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if int(self.steps) != self.steps or self.steps < 0:
            raise ValueError(f"steps must be a non-negative integer, got {self.steps}")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")
        if not self.alpha >= 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")

    @property
    def eta(self) -> float:
        return self.epsilon if self.step_size is None else self.step_size

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "step_size": self.step_size,
            "steps": self.steps,
            "norm_order": "inf",
            "alpha": self.alpha,
            "init": self.init.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AdvConfig":
        d = dict(d)
        if d.get("norm_order") in ("inf", "Infinity", None):
            d["norm_order"] = math.inf
        return cls(**d)


@dataclass
class StepRngs:
    """Independent generators for one optimization step.

    Keeping dropout and each initialization on their own stream means an
    objective that skips a draw never shifts the draws of another.
    """

    dropout: np.random.Generator
    label_init: np.random.Generator
    virtual_init: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int, *key: int) -> "StepRngs":
        children = np.random.SeedSequence([int(seed), *map(int, key)]).spawn(3)
        return cls(*(np.random.default_rng(c) for c in children))


@dataclass
class Diagnostics:
    label_term: float = 0.0
    smooth_term: float = 0.0
    label_delta_norm: float = 0.0
    virtual_delta_norm: float = 0.0
    extras: dict = field(default_factory=dict)


def project_linf(delta: np.ndarray, epsilon: float) -> np.ndarray:
    if epsilon < 0:
        raise ValueError(f"epsilon must be >= 0, got {epsilon}")
    return np.clip(delta, -epsilon, epsilon)


def linf_norm(delta: np.ndarray) -> float:
    return float(np.abs(delta).max()) if np.size(delta) else 0.0


def _embedded(params: ModelParams, batch) -> EmbeddedBatch:
    return batch if isinstance(batch, EmbeddedBatch) else embed(params, batch)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under row-wise softmax."""
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return (ad.log_softmax(logits) * Tensor(onehot)).sum() * (-1.0 / len(labels))


def label_loss(params: ModelParams, batch, delta=None, train_mode: bool = False,
               rng: Optional[np.random.Generator] = None) -> Tensor:
    emb = _embedded(params, batch)
    if emb.batch.labels is None:
        raise ValueError("label_loss requires a labeled batch")
    logits = forward_from_embeddings(params, emb, delta, train_mode, rng)
    return cross_entropy(logits, emb.batch.labels)


def reference_log_probs(params: ModelParams, batch) -> np.ndarray:
    """Clean predicted log-probabilities, dropout off, detached."""
    frozen = params.frozen()
    emb = batch if isinstance(batch, EmbeddedBatch) else embed(frozen, batch)
    logits = forward_from_embeddings(frozen, EmbeddedBatch(emb.embeddings.detach(), emb.batch))
    return ad._log_softmax(logits.data)


def virtual_loss(params: ModelParams, batch, delta=None,
                 reference: Optional[np.ndarray] = None) -> Tensor:
    """Mean ``KL(p(x + delta) || p(x))`` with the clean prediction held constant.

    Both passes run with dropout off, so ``delta = 0`` gives exactly zero.
    """
    emb = _embedded(params, batch)
    if reference is None:
        reference = reference_log_probs(params, emb)
    logits = forward_from_embeddings(params, emb, delta)
    rows = ad.kl_divergence(logits, reference)
    return rows.sum() * (1.0 / rows.size)


def estimate_delta(
    params: ModelParams,
    batch,
    config: AdvConfig,
    objective: Union[Objective, str] = Objective.LABEL,
    rng: Optional[np.random.Generator] = None,
    reference: Optional[np.ndarray] = None,
) -> np.ndarray:
    """K projected sign-gradient ascent steps on the chosen objective.

    Parameters are read through a frozen view, so they collect no gradient
    and are left untouched. Dropout is off throughout.
    """
    objective = Objective(objective)
    frozen = params.frozen()
    emb = _embedded(frozen, batch)
    emb = EmbeddedBatch(emb.embeddings.detach(), emb.batch)
    eps, eta = config.epsilon, config.eta

    if config.init is Init.UNIFORM:
        if rng is None:
            raise ValueError("uniform initialization requires a random generator")
        delta = rng.uniform(-eps, eps, size=emb.shape)
    else:
        delta = np.zeros(emb.shape)
    if eps == 0.0:
        return np.zeros(emb.shape)

    if objective is Objective.VIRTUAL and reference is None:
        reference = reference_log_probs(frozen, emb)
    for _ in range(int(config.steps)):
        d = Tensor(delta, requires_grad=True)
        if objective is Objective.LABEL:
            loss = label_loss(frozen, emb, d)
        else:
            loss = virtual_loss(frozen, emb, d, reference)
        ad.backward(loss)
        delta = project_linf(delta + eta * np.sign(d.grad), eps)
    return delta


def combined_loss(
    params: ModelParams,
    emb: EmbeddedBatch,
    label_delta: Optional[np.ndarray],
    virtual_delta: Optional[np.ndarray],
    alpha: float,
    reference: Optional[np.ndarray] = None,
    train_mode: bool = False,
    dropout_rng: Optional[np.random.Generator] = None,
):
    """Outer loss for fixed perturbations (first-order: no gradient through them).

    ``virtual_delta=None`` drops the smoothness term entirely.
    """
    label_term = label_loss(params, emb, label_delta, train_mode, dropout_rng)
    diag = Diagnostics(label_term=label_term.item(),
                       label_delta_norm=0.0 if label_delta is None else linf_norm(label_delta))
    if virtual_delta is None:
        return label_term, diag
    smooth = virtual_loss(params, emb, virtual_delta, reference)
    weighted = smooth * alpha
    diag.smooth_term = weighted.item()
    diag.virtual_delta_norm = linf_norm(virtual_delta)
    diag.extras["virtual_loss"] = smooth.item()
    return label_term + weighted, diag


def _objective(params, batch, config, use_label_delta, use_virtual, train_mode, rngs):
    emb = _embedded(params, batch)
    if emb.batch.labels is None:
        raise ValueError("adversarial objectives require a labeled batch")
    label_delta = virtual_delta = reference = None
    if use_label_delta:
        label_delta = estimate_delta(params, emb, config, Objective.LABEL,
                                     rngs.label_init if rngs else None)
    if use_virtual:
        reference = reference_log_probs(params, emb)
        virtual_delta = estimate_delta(params, emb, config, Objective.VIRTUAL,
                                       rngs.virtual_init if rngs else None, reference)
    return combined_loss(params, emb, label_delta, virtual_delta, config.alpha, reference,
                         train_mode, rngs.dropout if rngs else None)


def standard_objective(params, batch, config: Optional[AdvConfig] = None, train_mode=False,
                       rngs: Optional[StepRngs] = None):
    """Clean cross-entropy, returned with diagnostics like the others."""
    return _objective(params, batch, config or AdvConfig(), False, False, train_mode, rngs)


def adv_objective(params, batch, config: AdvConfig, train_mode=False,
                  rngs: Optional[StepRngs] = None) -> Tensor:
    return _objective(params, batch, config, True, False, train_mode, rngs)[0]


def smart_objective(params, batch, config: AdvConfig, train_mode=False,
                    rngs: Optional[StepRngs] = None) -> Tensor:
    return _objective(params, batch, config, False, True, train_mode, rngs)[0]


def alice_objective(params, batch, config: AdvConfig, train_mode=False,
                    rngs: Optional[StepRngs] = None):
    """Label term at one perturbation plus ``alpha`` times smoothness at another."""
    return _objective(params, batch, config, True, True, train_mode, rngs)


OBJECTIVES = {
    "standard": (False, False),
    "adv": (True, False),
    "smart": (False, True),
    "alice": (True, True),
}


def objective_loss(name: str, params, batch, config: AdvConfig, train_mode=False,
                   rngs: Optional[StepRngs] = None):
    """Dispatch by objective name; returns ``(loss, Diagnostics)``."""
    try:
        use_label, use_virtual = OBJECTIVES[name]
    except KeyError:
        raise ValueError(f"unknown objective {name!r}; expected one of {sorted(OBJECTIVES)}") from None
    return _objective(params, batch, config, use_label, use_virtual, train_mode, rngs)
