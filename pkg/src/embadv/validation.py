"""Input checks for the estimator API.

Token input is an integer array padded with ``PAD`` (-1): ``(n, options, seq_len)``
for ranking and ``(n, seq_len)`` for pairwise classification.
"""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array, check_consistent_length, column_or_1d

from .model import TaskKind

PAD = -1


def check_task(task) -> TaskKind:
    try:
        return TaskKind(task)
    except ValueError:
        raise ValueError(f"task must be one of {[k.value for k in TaskKind]}, got {task!r}") from None


def check_tokens(X, task, vocab_size=None):
    """Validate a padded token array; returns ``(tokens, pad_mask)`` with pads set to id 0."""
    task = check_task(task)
    X = check_array(X, dtype=None, allow_nd=True, ensure_2d=True, ensure_min_samples=1)
    if not np.issubdtype(X.dtype, np.integer):
        if not (np.issubdtype(X.dtype, np.floating) and np.all(X == np.round(X))):
            raise ValueError(f"token ids must be integers, got dtype {X.dtype}")
        X = X.astype(np.int64)
    want = 3 if task is TaskKind.RANKING else 2
    if X.ndim != want:
        layout = "(n, options, seq_len)" if want == 3 else "(n, seq_len)"
        raise ValueError(f"{task.value} input must be {layout}, got shape {X.shape}")
    if np.any(X < PAD):
        raise ValueError(f"token ids must be >= 0 (or {PAD} for padding)")
    mask = X != PAD
    if not np.all(mask.any(-1)):
        raise ValueError("every sequence needs at least one non-pad token")
    if vocab_size is not None and X.max() >= vocab_size:
        raise ValueError(f"token id {X.max()} outside vocabulary of size {vocab_size}")
    return np.where(mask, X, 0).astype(np.int64), mask.astype(np.float64)


def check_labels(y, n_samples: int, n_classes: int) -> np.ndarray:
    y = column_or_1d(y, warn=True)
    check_consistent_length(np.empty(n_samples), y)
    if not np.all(np.isfinite(y.astype(float))) or np.any(y != np.round(y.astype(float))):
        raise ValueError("labels must be integers")
    y = y.astype(np.int64)
    if np.any(y < 0) or np.any(y >= n_classes):
        raise ValueError(f"labels must be in [0, {n_classes}), got range [{y.min()}, {y.max()}]")
    return y
