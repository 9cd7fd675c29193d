"""scikit-learn style wrapper around the training loop."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .adversarial import AdvConfig
from .data import Dataset
from .metrics import default_attack, robust_accuracy
from .model import TaskKind, TokenBatch, forward, init_params
from .optim import TrainConfig, train
from .validation import PAD, check_labels, check_task, check_tokens


class TokenArrays:
    """Array-backed stand-in for a Dataset: one row per example."""

    def __init__(self, task_kind: TaskKind, tokens, mask, labels=None):
        self.task_kind = task_kind
        self.tokens, self.mask, self.labels = tokens, mask, labels

    def __len__(self):
        return len(self.tokens)

    def subset(self, indices) -> "TokenArrays":
        idx = np.asarray(indices, dtype=np.int64)
        return TokenArrays(self.task_kind, self.tokens[idx], self.mask[idx],
                           None if self.labels is None else self.labels[idx])

    def to_batch(self, indices=None) -> TokenBatch:
        part = self if indices is None else self.subset(indices)
        group_ids = np.arange(len(part)) if self.task_kind is TaskKind.PAIRWISE else None
        return TokenBatch(self.task_kind, part.tokens, part.mask, part.labels, group_ids)


def dataset_arrays(dataset: Dataset):
    """``(X, y)`` in the estimator layout, padded with -1.

    Pairwise datasets flatten to one row per candidate; their group ids are
    returned as a third element.
    """
    batch = dataset.to_batch()
    X = np.where(batch.pad_mask > 0, batch.tokens, PAD)
    if batch.task_kind is TaskKind.PAIRWISE:
        return X, batch.labels.copy(), batch.group_ids.copy()
    return X, batch.labels.copy()


class AdversarialClassifier(ClassifierMixin, BaseEstimator):
    """Bag-of-embeddings classifier fine-tuned with an embedding-space adversarial objective.

    ``objective`` is one of ``standard``, ``adv``, ``smart`` or ``alice``. For
    ``task="ranking"`` X has shape ``(n, options, seq_len)`` and y holds the
    index of the correct option; for ``task="pairwise"`` X has shape
    ``(n, seq_len)`` and y is 0/1. Token id -1 marks padding.

    A ``validation_fraction`` of the rows is held out to pick the best epoch;
    with 0 the training rows are used for that.
    """

    def __init__(self, task="ranking", objective="alice", epsilon=0.05, step_size=None, steps=1,
                 alpha=1.0, init="uniform", learning_rate=0.03, batch_size=32, max_epochs=10,
                 warmup_ratio=0.1, clip_norm=1.0, dropout=0.1, d_emb=16, hidden=(32,),
                 activation="relu", embedding_scale=1.0, validation_fraction=0.1,
                 vocab_size=None, random_state=0):
        self.task = task
        self.objective = objective
        self.epsilon = epsilon
        self.step_size = step_size
        self.steps = steps
        self.alpha = alpha
        self.init = init
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.warmup_ratio = warmup_ratio
        self.clip_norm = clip_norm
        self.dropout = dropout
        self.d_emb = d_emb
        self.hidden = hidden
        self.activation = activation
        self.embedding_scale = embedding_scale
        self.validation_fraction = validation_fraction
        self.vocab_size = vocab_size
        self.random_state = random_state

    def _seed(self) -> int:
        if isinstance(self.random_state, (int, np.integer)):
            return int(self.random_state)
        return int(check_random_state(self.random_state).randint(np.iinfo(np.int32).max))

    def _train_config(self, seed: int) -> TrainConfig:
        adv = AdvConfig(epsilon=self.epsilon, step_size=self.step_size, steps=self.steps,
                        alpha=self.alpha, init=self.init)
        return TrainConfig(learning_rate=self.learning_rate, batch_size=self.batch_size,
                           max_epochs=self.max_epochs, warmup_ratio=self.warmup_ratio,
                           clip_norm=self.clip_norm, dropout_rate=self.dropout, seed=seed,
                           objective=self.objective, adv=adv)

    def fit(self, X, y):
        task = check_task(self.task)
        tokens, mask = check_tokens(X, task, self.vocab_size)
        n_classes = tokens.shape[1] if task is TaskKind.RANKING else 2
        labels = check_labels(y, len(tokens), n_classes)
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in [0, 1)")
        seed = self._seed()
        cfg = self._train_config(seed)

        data = TokenArrays(task, tokens, mask, labels)
        n_dev = int(round(self.validation_fraction * len(data)))
        if n_dev and len(data) - n_dev < 1:
            raise ValueError("validation_fraction leaves no training rows")
        order = np.random.default_rng([seed, 11]).permutation(len(data))
        train_set = data.subset(order[n_dev:]) if n_dev else data
        dev = data.subset(order[:n_dev]) if n_dev else None

        self.vocab_size_ = self.vocab_size if self.vocab_size is not None else int(tokens.max()) + 1
        params = init_params(vocab_size=self.vocab_size_, d_emb=self.d_emb, hidden=tuple(self.hidden),
                             activation=self.activation, dropout_rate=self.dropout,
                             embedding_scale=self.embedding_scale, seed=seed)
        self.params_, self.history_ = train(params, train_set, cfg, dev)
        self.classes_ = np.arange(n_classes)
        self.n_features_in_ = tokens.shape[-1]
        return self

    def _batch(self, X, y=None) -> TokenBatch:
        check_is_fitted(self, "params_")
        task = check_task(self.task)
        tokens, mask = check_tokens(X, task, self.vocab_size_)
        if task is TaskKind.RANKING and tokens.shape[1] != len(self.classes_):
            raise ValueError(f"expected {len(self.classes_)} options, got {tokens.shape[1]}")
        labels = None if y is None else check_labels(y, len(tokens), len(self.classes_))
        return TokenArrays(task, tokens, mask, labels).to_batch()

    def decision_function(self, X) -> np.ndarray:
        """Raw logits, one column per option (ranking) or class (pairwise)."""
        batch = self._batch(X)
        return forward(self.params_.frozen(), batch).data

    def predict_proba(self, X) -> np.ndarray:
        return ad.softmax(ad.Tensor(self.decision_function(X))).data

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(-1)]

    def robust_score(self, X, y, epsilon=None, steps=5, step_size=None) -> float:
        """Accuracy that survives an l-inf sign-gradient attack on the embeddings.

        Defaults to the training radius with five quarter-radius steps.
        """
        batch = self._batch(X, y)
        eps = self.epsilon if epsilon is None else epsilon
        attack = default_attack(eps)
        if steps != attack.steps or step_size is not None:
            attack = AdvConfig(epsilon=eps, steps=steps,
                               step_size=attack.step_size if step_size is None else step_size)
        return robust_accuracy(self.params_, batch, attack)
