"""Seeded synthetic tasks in both formats, JSON-lines I/O, splits and folds.

Generation rule: a fixed-point-free involution ``g`` pairs up the key tokens.
Each context holds exactly one key token ``k`` among filler tokens. A
candidate continuation is correct (ranking) or plausible (pairwise) when its
single key token is ``g(k)``; distractors carry ``g(k')`` for some ``k' != k``.
Because ``g`` is its own inverse, a bag of the two key tokens is enough to
decide the label, which is what the bag-of-embeddings model sees.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .model import TaskKind, TokenBatch

FORMAT_NAME = "embadv-dataset"
FORMAT_VERSION = 1


class DatasetFormatError(ValueError):
    def __init__(self, path, lineno: int, message: str):
        super().__init__(f"{path}:{lineno}: {message}")
        self.lineno = lineno


@dataclass(frozen=True)
class DatasetSpec:
    task_kind: TaskKind = TaskKind.RANKING
    num_examples: int = 3000
    vocab_size: int = 64
    seq_len: int = 12
    num_options: int = 4
    candidates_per_question: int = 4
    key_token_count: int = 16
    label_noise_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "task_kind", TaskKind(self.task_kind))
        for name in ("num_examples", "vocab_size", "seq_len", "num_options",
                     "candidates_per_question", "key_token_count"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.key_token_count >= self.vocab_size:
            raise ValueError("key_token_count must be smaller than vocab_size")
        if self.key_token_count % 2:
            raise ValueError("key_token_count must be even (key tokens are paired)")
        if self.task_kind is TaskKind.RANKING and self.key_token_count < self.num_options:
            raise ValueError("key_token_count must be >= num_options for distinct distractors")
        if self.key_token_count < 2:
            raise ValueError("key_token_count must be at least 2")
        if not 0.0 <= self.label_noise_rate < 1.0:
            raise ValueError("label_noise_rate must be in [0, 1)")
        if self.seq_len < 3:
            raise ValueError("seq_len must be at least 3")

    @property
    def num_candidates(self) -> int:
        if self.task_kind is TaskKind.RANKING:
            return self.num_options
        return self.candidates_per_question

    def to_dict(self) -> dict:
        d = asdict(self)
        d["task_kind"] = self.task_kind.value
        return d


@dataclass
class ExampleGroup:
    """One question: a token sequence per candidate and a 0/1 label per candidate.

    Ranking groups have exactly one label equal to 1.
    """

    group_id: int
    task_kind: TaskKind
    tokens: list
    labels: list

    def __post_init__(self):
        self.task_kind = TaskKind(self.task_kind)

    @property
    def correct_option(self) -> int:
        return self.labels.index(1)

    def to_record(self) -> dict:
        return {"group_id": self.group_id, "task_kind": self.task_kind.value,
                "tokens": self.tokens, "labels": self.labels}


@dataclass
class Dataset:
    examples: list
    spec: DatasetSpec

    def __len__(self):
        return len(self.examples)

    def subset(self, indices) -> "Dataset":
        return Dataset([self.examples[i] for i in indices], self.spec)

    def to_batch(self, indices: Optional[Sequence[int]] = None) -> TokenBatch:
        groups = self.examples if indices is None else [self.examples[i] for i in indices]
        return groups_to_batch(groups, self.spec.task_kind, self.spec.seq_len)


def groups_to_batch(groups: Sequence[ExampleGroup], task_kind, seq_len: int) -> TokenBatch:
    task_kind = TaskKind(task_kind)
    seqs = [s for g in groups for s in g.tokens]
    tokens = np.zeros((len(seqs), seq_len), dtype=np.int64)
    mask = np.zeros((len(seqs), seq_len))
    for i, s in enumerate(seqs):
        if len(s) > seq_len:
            raise ValueError(f"sequence of length {len(s)} exceeds seq_len {seq_len}")
        tokens[i, :len(s)] = s
        mask[i, :len(s)] = 1.0
    if task_kind is TaskKind.RANKING:
        n_opt = len(groups[0].tokens) if groups else 0
        if any(len(g.tokens) != n_opt for g in groups):
            raise ValueError("ranking groups must share one option count")
        return TokenBatch(task_kind, tokens.reshape(len(groups), n_opt, seq_len),
                          mask.reshape(len(groups), n_opt, seq_len),
                          np.array([g.correct_option for g in groups], dtype=np.int64))
    labels = np.array([lab for g in groups for lab in g.labels], dtype=np.int64)
    gids = np.array([g.group_id for g in groups for _ in g.tokens], dtype=np.int64)
    return TokenBatch(task_kind, tokens, mask, labels, gids)


def key_pairing(spec: DatasetSpec) -> np.ndarray:
    """The seeded involution over key tokens: ``pair[pair[k]] == k`` and ``pair[k] != k``."""
    rng = np.random.default_rng([spec.seed, 0])
    order = rng.permutation(spec.key_token_count)
    pair = np.empty(spec.key_token_count, dtype=np.int64)
    for a, b in zip(order[0::2], order[1::2]):
        pair[a], pair[b] = b, a
    return pair


def _sequence(rng, key: int, answer: int, spec: DatasetSpec) -> list:
    fillers = np.arange(spec.key_token_count, spec.vocab_size)
    max_ctx = spec.seq_len - max(1, spec.seq_len // 3)
    ctx_len = int(rng.integers(max(1, spec.seq_len // 2 - 1), max_ctx + 1))
    opt_len = int(rng.integers(1, spec.seq_len - ctx_len + 1))
    ctx = rng.choice(fillers, size=ctx_len).tolist()
    ctx[int(rng.integers(ctx_len))] = key
    opt = rng.choice(fillers, size=opt_len).tolist()
    opt[int(rng.integers(opt_len))] = answer
    return [int(t) for t in ctx + opt]


def generate(spec: DatasetSpec) -> Dataset:
    pair = key_pairing(spec)
    rng = np.random.default_rng([spec.seed, 1])
    n_keys = spec.key_token_count
    examples = []
    for gid in range(spec.num_examples):
        key = int(rng.integers(n_keys))
        others = np.delete(np.arange(n_keys), key)
        if spec.task_kind is TaskKind.RANKING:
            n_opt = spec.num_options
            correct = int(rng.integers(n_opt))
            distract = rng.choice(others, size=n_opt - 1, replace=False)
            keys = list(distract[:correct]) + [key] + list(distract[correct:])
            tokens = [_sequence(rng, key, int(pair[k]), spec) for k in keys]
            if rng.random() < spec.label_noise_rate:
                correct = int((correct + rng.integers(1, n_opt)) % n_opt)
            labels = [int(i == correct) for i in range(n_opt)]
        else:
            n_cand = spec.candidates_per_question
            n_plausible = int(rng.integers(0, n_cand + 1))
            plausible = np.zeros(n_cand, dtype=bool)
            plausible[rng.choice(n_cand, size=n_plausible, replace=False)] = True
            tokens, labels = [], []
            for is_p in plausible:
                k = key if is_p else int(rng.choice(others))
                tokens.append(_sequence(rng, key, int(pair[k]), spec))
                flip = rng.random() < spec.label_noise_rate
                labels.append(int(bool(is_p) != flip))
        examples.append(ExampleGroup(gid, spec.task_kind, tokens, labels))
    return Dataset(examples, spec)


def rule_labels(group: ExampleGroup, spec: DatasetSpec) -> list:
    """Re-derive noise-free labels from tokens alone.

    A candidate is correct iff it holds two key tokens that are partners
    under the pairing.
    """
    pair = key_pairing(spec)
    out = []
    for seq in group.tokens:
        keys = [t for t in seq if t < spec.key_token_count]
        out.append(int(len(keys) == 2 and pair[keys[0]] == keys[1]))
    return out


def _partition_sizes(n: int, fractions: Sequence[float]) -> list:
    raw = [f * n for f in fractions]
    sizes = [int(np.floor(r)) for r in raw]
    leftover = n - sum(sizes)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[:leftover]:
        sizes[i] += 1
    return sizes


def split(dataset: Dataset, fractions: Sequence[float] = (0.8, 0.1, 0.1),
          seed: Optional[int] = None):
    """Shuffle and cut into train/dev/test (or as many parts as fractions)."""
    fractions = list(fractions)
    if not fractions or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be non-negative and sum to 1, got {fractions}")
    rng = np.random.default_rng([dataset.spec.seed if seed is None else seed, 2])
    perm = rng.permutation(len(dataset))
    parts, start = [], 0
    for size in _partition_sizes(len(dataset), fractions):
        parts.append(dataset.subset(perm[start:start + size].tolist()))
        start += size
    return tuple(parts)


def kfold(dataset: Dataset, k: int = 5, seed: Optional[int] = None) -> list:
    if int(k) != k or k < 2 or k > len(dataset):
        raise ValueError(f"k must be an integer in [2, {len(dataset)}], got {k}")
    rng = np.random.default_rng([dataset.spec.seed if seed is None else seed, 3])
    perm = rng.permutation(len(dataset))
    return [dataset.subset(chunk.tolist()) for chunk in np.array_split(perm, k)]


def save(dataset: Dataset, path: Union[str, Path]):
    with open(path, "w") as fh:
        header = {"format": FORMAT_NAME, "version": FORMAT_VERSION,
                  "records": len(dataset), "spec": dataset.spec.to_dict()}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for ex in dataset.examples:
            fh.write(json.dumps(ex.to_record(), sort_keys=True) + "\n")


def _check_record(rec, spec: DatasetSpec) -> ExampleGroup:
    if not isinstance(rec, dict):
        raise ValueError("record is not a JSON object")
    missing = {"group_id", "task_kind", "tokens", "labels"} - rec.keys()
    if missing:
        raise ValueError(f"missing fields {sorted(missing)}")
    if rec["task_kind"] != spec.task_kind.value:
        raise ValueError(f"task_kind {rec['task_kind']!r} != header {spec.task_kind.value!r}")
    tokens, labels = rec["tokens"], rec["labels"]
    if not isinstance(tokens, list) or not all(isinstance(s, list) for s in tokens):
        raise ValueError("tokens must be a list of token lists")
    if len(labels) != len(tokens):
        raise ValueError("one label per candidate required")
    for s in tokens:
        if not s or len(s) > spec.seq_len:
            raise ValueError(f"sequence length must be in [1, {spec.seq_len}]")
        if any(not isinstance(t, int) or t < 0 or t >= spec.vocab_size for t in s):
            raise ValueError(f"token ids must be integers in [0, {spec.vocab_size})")
    if any(lab not in (0, 1) for lab in labels):
        raise ValueError("labels must be 0 or 1")
    if spec.task_kind is TaskKind.RANKING and sum(labels) != 1:
        raise ValueError("ranking groups need exactly one correct option")
    return ExampleGroup(int(rec["group_id"]), spec.task_kind, tokens, labels)


def load(path: Union[str, Path]) -> Dataset:
    with open(path) as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetFormatError(path, 1, "empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(path, 1, f"malformed header: {exc.msg}") from None
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise DatasetFormatError(path, 1, "not an embadv dataset header")
    if header.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(path, 1, f"unsupported version {header.get('version')}")
    try:
        spec = DatasetSpec(**header["spec"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetFormatError(path, 1, f"bad spec: {exc}") from None
    examples = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            examples.append(_check_record(rec, spec))
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(path, lineno, f"malformed record: {exc.msg}") from None
        except (ValueError, TypeError) as exc:
            raise DatasetFormatError(path, lineno, str(exc)) from None
    if header.get("records") != len(examples):
        raise DatasetFormatError(
            path, len(lines) + 1,
            f"file ends after {len(examples)} records, header promises {header.get('records')}",
        )
    return Dataset(examples, spec)
