"""Bag-of-embeddings classifier with ranking and pairwise heads.

Tokens are embedded, mean-pooled over non-padding positions, passed through a
small feed-forward encoder and scored by one of two heads:

* ranking: every option sequence gets one score, softmaxed across options;
* pairwise: every candidate sequence gets two logits (implausible, plausible).
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_VERSION = 1
ACTIVATIONS = {"relu": ad.relu, "tanh": ad.tanh}


class TaskKind(str, enum.Enum):
    RANKING = "ranking"
    PAIRWISE = "pairwise"


@dataclass
class DenseLayer:
    weight: Tensor
    bias: Tensor
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ad.ShapeError(
                f"layer weight {self.weight.shape} and bias {self.bias.shape} disagree"
            )


@dataclass
class ModelParams:
    """Embedding table, encoder layers and both task heads.

    Parameters live in leaf tensors. Training never mutates them in place;
    :meth:`with_arrays` builds the next set.
    """

    embedding: Tensor
    layers: list
    head_rank: Tensor
    head_pair: Tensor
    head_pair_bias: Tensor
    dropout_rate: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        width = self.embedding.shape[1]
        for i, layer in enumerate(self.layers):
            if layer.weight.shape[0] != width:
                raise ad.ShapeError(
                    f"layer {i} expects input width {layer.weight.shape[0]}, got {width}"
                )
            width = layer.weight.shape[1]
        if self.head_rank.shape != (width,):
            raise ad.ShapeError(f"head_rank shape {self.head_rank.shape} != ({width},)")
        if self.head_pair.shape != (width, 2) or self.head_pair_bias.shape != (2,):
            raise ad.ShapeError(
                f"head_pair shapes {self.head_pair.shape}/{self.head_pair_bias.shape} "
                f"inconsistent with width {width}"
            )

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def d_emb(self) -> int:
        return self.embedding.shape[1]

    def named_tensors(self) -> list:
        out = [("embedding", self.embedding)]
        for i, layer in enumerate(self.layers):
            out.append((f"layers.{i}.weight", layer.weight))
            out.append((f"layers.{i}.bias", layer.bias))
        out += [
            ("head_rank", self.head_rank),
            ("head_pair", self.head_pair),
            ("head_pair_bias", self.head_pair_bias),
        ]
        return out

    def tensors(self) -> list:
        return [t for _, t in self.named_tensors()]

    def arrays(self) -> list:
        return [t.data for t in self.tensors()]

    def grads(self) -> list:
        return [np.zeros_like(t.data) if t.grad is None else t.grad for t in self.tensors()]

    def zero_grad(self):
        for t in self.tensors():
            t.zero_grad()

    def with_arrays(self, arrays: Sequence[np.ndarray], requires_grad: bool = True) -> "ModelParams":
        arrays = list(arrays)
        if len(arrays) != len(self.named_tensors()):
            raise ValueError("array count does not match parameter count")
        for (name, t), a in zip(self.named_tensors(), arrays):
            if a.shape != t.shape:
                raise ad.ShapeError(f"{name}: expected shape {t.shape}, got {a.shape}")
        leaves = [Tensor._wrap(np.asarray(a, dtype=np.float64), requires_grad) for a in arrays]
        layers = [
            DenseLayer(leaves[1 + 2 * i], leaves[2 + 2 * i], layer.activation)
            for i, layer in enumerate(self.layers)
        ]
        return ModelParams(leaves[0], layers, leaves[-3], leaves[-2], leaves[-1], self.dropout_rate)

    def frozen(self) -> "ModelParams":
        """Same arrays, no gradient tracking."""
        return self.with_arrays(self.arrays(), requires_grad=False)

    def copy(self) -> "ModelParams":
        return self.with_arrays([a.copy() for a in self.arrays()])

    def with_tensor(self, name: str, tensor: Tensor) -> "ModelParams":
        """Frozen copy with parameter ``name`` replaced by ``tensor``.

        Only ``tensor`` can carry gradient, which is what a per-parameter
        gradient check needs.
        """
        names = [n for n, _ in self.named_tensors()]
        leaves = self.frozen().tensors()
        leaves[names.index(name)] = tensor
        layers = [DenseLayer(leaves[1 + 2 * i], leaves[2 + 2 * i], layer.activation)
                  for i, layer in enumerate(self.layers)]
        return ModelParams(leaves[0], layers, leaves[-3], leaves[-2], leaves[-1], self.dropout_rate)

    def with_dropout(self, rate: float) -> "ModelParams":
        return replace(self, dropout_rate=rate)


def init_params(
    vocab_size: int = 64,
    d_emb: int = 16,
    hidden: Sequence[int] = (32,),
    activation: str = "tanh",
    dropout_rate: float = 0.1,
    embedding_scale: float = 1.0,
    seed: Union[int, np.random.Generator, None] = 0,
) -> ModelParams:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    embedding = Tensor(rng.normal(0.0, embedding_scale, size=(vocab_size, d_emb)), requires_grad=True)
    layers = []
    width = d_emb
    for h in hidden:
        limit = np.sqrt(6.0 / (width + h))
        layers.append(DenseLayer(
            Tensor(rng.uniform(-limit, limit, size=(width, h)), requires_grad=True),
            Tensor(np.zeros(h), requires_grad=True),
            activation,
        ))
        width = h
    limit = np.sqrt(6.0 / (width + 1))
    head_rank = Tensor(rng.uniform(-limit, limit, size=width), requires_grad=True)
    limit = np.sqrt(6.0 / (width + 2))
    head_pair = Tensor(rng.uniform(-limit, limit, size=(width, 2)), requires_grad=True)
    return ModelParams(embedding, layers, head_rank, head_pair,
                       Tensor(np.zeros(2), requires_grad=True), dropout_rate)


@dataclass
class TokenBatch:
    """Token ids plus labels for one task format.

    Ranking: ``tokens`` is ``[batch, options, seq_len]`` and ``labels`` holds
    the correct option index per example. Pairwise: ``tokens`` is
    ``[batch, seq_len]``, ``labels`` are 0/1 per candidate and ``group_ids``
    name the question each candidate belongs to.
    """

    task_kind: TaskKind
    tokens: np.ndarray
    pad_mask: np.ndarray
    labels: Optional[np.ndarray] = None
    group_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        self.task_kind = TaskKind(self.task_kind)
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.pad_mask = np.asarray(self.pad_mask, dtype=np.float64)
        if self.pad_mask.shape != self.tokens.shape:
            raise ad.ShapeError(
                f"pad_mask shape {self.pad_mask.shape} != tokens shape {self.tokens.shape}"
            )
        ranking = self.task_kind is TaskKind.RANKING
        if self.tokens.ndim != (3 if ranking else 2):
            raise ad.ShapeError(f"{self.task_kind.value} tokens must be "
                                f"{3 if ranking else 2}-D, got shape {self.tokens.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.tokens.shape[0],):
                raise ad.ShapeError(f"labels shape {self.labels.shape} != ({self.tokens.shape[0]},)")
            upper = self.tokens.shape[1] if ranking else 2
            if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= upper):
                raise ValueError(f"labels must lie in [0, {upper})")
        if ranking and self.group_ids is not None:
            raise ValueError("group_ids are only meaningful for pairwise batches")
        if not ranking:
            if self.group_ids is None:
                raise ValueError("pairwise batches require group_ids")
            self.group_ids = np.asarray(self.group_ids, dtype=np.int64)
            if self.group_ids.shape != (self.tokens.shape[0],):
                raise ad.ShapeError("group_ids must have one entry per candidate")

    def __len__(self):
        return self.tokens.shape[0]

    @property
    def num_classes(self) -> int:
        return self.tokens.shape[1] if self.task_kind is TaskKind.RANKING else 2


@dataclass
class EmbeddedBatch:
    embeddings: Tensor
    batch: TokenBatch

    @property
    def shape(self) -> tuple:
        return self.embeddings.shape


def embed(params: ModelParams, batch: TokenBatch) -> EmbeddedBatch:
    if batch.tokens.size and (batch.tokens.min() < 0 or batch.tokens.max() >= params.vocab_size):
        raise IndexError(
            f"token id out of range [0, {params.vocab_size}): "
            f"min {batch.tokens.min()}, max {batch.tokens.max()}"
        )
    return EmbeddedBatch(ad.gather(params.embedding, batch.tokens), batch)


def _dropout(x: Tensor, params: ModelParams, train_mode: bool, rng) -> Tensor:
    if not train_mode or params.dropout_rate == 0.0:
        return x
    if rng is None:
        raise ValueError("train_mode with dropout requires a random generator")
    return ad.dropout(x, params.dropout_rate, rng)


def forward_from_embeddings(
    params: ModelParams,
    emb: EmbeddedBatch,
    delta=None,
    train_mode: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> Tensor:
    x = emb.embeddings
    if delta is not None:
        delta = ad.as_tensor(delta)
        if delta.shape != x.shape:
            raise ad.ShapeError(
                f"perturbation shape {delta.shape} does not match embeddings {x.shape}"
            )
        x = x + delta
    pooled = ad.masked_mean(x, emb.batch.pad_mask)
    ranking = emb.batch.task_kind is TaskKind.RANKING
    if ranking:
        n_batch, n_opt = pooled.shape[:2]
        pooled = pooled.reshape(n_batch * n_opt, pooled.shape[-1])
    h = _dropout(pooled, params, train_mode, rng)
    for layer in params.layers:
        h = ACTIVATIONS[layer.activation](h @ layer.weight + layer.bias)
        h = _dropout(h, params, train_mode, rng)
    if ranking:
        return (h @ params.head_rank).reshape(n_batch, n_opt)
    return h @ params.head_pair + params.head_pair_bias


def forward(params: ModelParams, batch: TokenBatch, train_mode: bool = False,
            rng: Optional[np.random.Generator] = None) -> Tensor:
    return forward_from_embeddings(params, embed(params, batch), None, train_mode, rng)


def predict(params: ModelParams, batch: TokenBatch) -> np.ndarray:
    """Option index (ranking) or 0/1 plausibility (pairwise), dropout off."""
    return forward(params.frozen(), batch).data.argmax(axis=-1)


def save_checkpoint(params: ModelParams, path: Union[str, Path]):
    meta = {
        "version": CHECKPOINT_VERSION,
        "activations": [layer.activation for layer in params.layers],
        "dropout_rate": params.dropout_rate,
        "names": [name for name, _ in params.named_tensors()],
    }
    arrays = {name: t.data for name, t in params.named_tensors()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path: Union[str, Path]) -> ModelParams:
    with np.load(path, allow_pickle=False) as npz:
        if "__meta__" not in npz.files:
            raise ValueError(f"{path}: not a model checkpoint (missing metadata)")
        meta = json.loads(str(npz["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(
                f"{path}: checkpoint version {meta.get('version')} != {CHECKPOINT_VERSION}"
            )
        arrays = {name: npz[name] for name in meta["names"]}
    leaf = lambda name: Tensor._wrap(arrays[name].astype(np.float64), True)  # noqa: E731
    layers = [
        DenseLayer(leaf(f"layers.{i}.weight"), leaf(f"layers.{i}.bias"), act)
        for i, act in enumerate(meta["activations"])
    ]
    return ModelParams(leaf("embedding"), layers, leaf("head_rank"), leaf("head_pair"),
                       leaf("head_pair_bias"), float(meta["dropout_rate"]))
