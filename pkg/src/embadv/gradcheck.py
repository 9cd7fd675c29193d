"""Finite-difference audit of every differentiable op and of the training objectives.

Each case builder takes a generator and returns ``(f, point)`` where ``f``
maps a Tensor at ``point`` to a scalar. Op outputs are contracted with a
random weight so the whole Jacobian is exercised, not just its column sums.
"""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .adversarial import (AdvConfig, Init, Objective, StepRngs, combined_loss, estimate_delta,
                          reference_log_probs)
from .autodiff import Tensor, grad_check
from .data import DatasetSpec, generate
from .model import TaskKind, embed, init_params


def _away_from_zero(rng, shape):
    x = rng.normal(size=shape)
    return np.sign(x) * (0.1 + np.abs(x))


def _random_shape(rng, ndim_max=3):
    return tuple(int(s) for s in rng.integers(1, 5, size=rng.integers(1, ndim_max + 1)))


def _unary(fn, domain=None):
    def build(rng):
        shape = _random_shape(rng)
        x = domain(rng, shape) if domain else rng.normal(size=shape)
        w = rng.normal(size=fn(Tensor(x)).shape)
        return (lambda t: (fn(t) * Tensor(w)).sum()), x
    return build


def _binary_same(fn):
    def build(rng):
        shape = _random_shape(rng)
        other = Tensor(rng.normal(size=shape))
        w = rng.normal(size=shape)
        return (lambda t: (fn(t, other) * Tensor(w)).sum()), rng.normal(size=shape)
    return build


def _bias_add(rng):
    n, d = rng.integers(1, 5, size=2)
    x = Tensor(rng.normal(size=(n, d)))
    w = rng.normal(size=(n, d))
    return (lambda b: ((x + b) * Tensor(w)).sum()), rng.normal(size=d)


def _matmul_left(rng):
    n, k, m = rng.integers(1, 5, size=3)
    b = Tensor(rng.normal(size=(k, m)))
    w = rng.normal(size=(n, m))
    return (lambda a: ((a @ b) * Tensor(w)).sum()), rng.normal(size=(n, k))


def _matvec_right(rng):
    n, k = rng.integers(1, 5, size=2)
    a = Tensor(rng.normal(size=(n, k)))
    w = rng.normal(size=n)
    return (lambda b: ((a @ b) * Tensor(w)).sum()), rng.normal(size=k)


def _gather(rng):
    v, d = rng.integers(2, 6, size=2)
    ids = rng.integers(0, v, size=(3, 4))
    w = rng.normal(size=(3, 4, d))
    return (lambda t: (ad.gather(t, ids) * Tensor(w)).sum()), rng.normal(size=(v, d))


def _masked_mean(rng):
    b, t, d = rng.integers(1, 5, size=3)
    mask = (rng.random((b, t)) < 0.7).astype(float)
    w = rng.normal(size=(b, d))
    return (lambda x: (ad.masked_mean(x, mask) * Tensor(w)).sum()), rng.normal(size=(b, t, d))


def _dropout(rng):
    shape = _random_shape(rng)
    seed = int(rng.integers(1 << 30))
    w = rng.normal(size=shape)
    return (lambda x: (ad.dropout(x, 0.3, np.random.default_rng(seed)) * Tensor(w)).sum()), \
        rng.normal(size=shape)


def _reduce(fn):
    def build(rng):
        shape = _random_shape(rng)
        axis = int(rng.integers(len(shape)))
        w = rng.normal(size=shape[:axis] + shape[axis + 1:])
        return (lambda x: (fn(x, axis) * Tensor(w)).sum()), rng.normal(size=shape)
    return build


def _kl(rng):
    n, c = rng.integers(1, 5, size=2)
    ref = ad._log_softmax(rng.normal(size=(n, c)))
    w = rng.normal(size=n)
    return (lambda z: (ad.kl_divergence(z, ref) * Tensor(w)).sum()), rng.normal(size=(n, c))


OP_CASES = {
    "add": _binary_same(lambda a, b: a + b),
    "add_scalar": _unary(lambda t: t + 1.5),
    "add_bias": _bias_add,
    "sub": _binary_same(lambda a, b: b - a),
    "mul": _binary_same(lambda a, b: a * b),
    "mul_scalar": _unary(lambda t: -2.5 * t),
    "neg": _unary(lambda t: -t),
    "matmul": _matmul_left,
    "matvec": _matvec_right,
    "gather": _gather,
    "relu": _unary(ad.relu, _away_from_zero),
    "tanh": _unary(ad.tanh),
    "exp": _unary(ad.exp),
    "log": _unary(ad.log, lambda rng, s: rng.uniform(0.5, 2.0, size=s)),
    "log_softmax": _unary(ad.log_softmax),
    "softmax": _unary(ad.softmax),
    "kl_divergence": _kl,
    "sum_axis": _reduce(lambda x, a: x.sum(a)),
    "mean_axis": _reduce(lambda x, a: x.mean(a)),
    "reshape": _unary(lambda t: t.reshape(-1)),
    "masked_mean": _masked_mean,
    "dropout": _dropout,
}


def objective_case(objective: str):
    """Gradient of a full objective w.r.t. one random parameter tensor of a random tiny model.

    Perturbations and the clean reference are estimated once and then held
    fixed, which is exactly the first-order outer gradient that training uses.
    The model is tanh so a central difference never straddles a relu kink;
    the relu rule itself is covered by its own op case.
    """
    use_label = objective in ("adv", "alice")
    use_virtual = objective in ("smart", "alice")

    def build(rng):
        kind = TaskKind.RANKING if rng.random() < 0.5 else TaskKind.PAIRWISE
        spec = DatasetSpec(task_kind=kind, num_examples=int(rng.integers(2, 5)), vocab_size=10,
                           seq_len=5, num_options=3, candidates_per_question=3, key_token_count=4,
                           seed=int(rng.integers(1 << 31)))
        batch = generate(spec).to_batch()
        params = init_params(vocab_size=10, d_emb=3, hidden=(4,), activation="tanh",
                             dropout_rate=0.0, seed=int(rng.integers(1 << 31)))
        cfg = AdvConfig(epsilon=float(rng.uniform(0.01, 0.3)), alpha=float(rng.uniform(0.1, 2.0)),
                        steps=int(rng.integers(1, 3)), init=Init.UNIFORM)
        rngs = StepRngs.from_seed(int(rng.integers(1 << 31)), 0)
        ref = reference_log_probs(params, batch)
        d1 = estimate_delta(params, batch, cfg, Objective.LABEL, rngs.label_init) if use_label else None
        d2 = estimate_delta(params, batch, cfg, Objective.VIRTUAL, rngs.virtual_init, ref) \
            if use_virtual else None
        names = [n for n, _ in params.named_tensors()
                 if not (kind is TaskKind.RANKING and n.startswith("head_pair"))
                 and not (kind is TaskKind.PAIRWISE and n == "head_rank")]
        name = names[int(rng.integers(len(names)))]

        def f(w):
            trial = params.with_tensor(name, w)
            return combined_loss(trial, embed(trial, batch), d1, d2, cfg.alpha, ref)[0]

        return f, dict(params.named_tensors())[name].data.copy()
    return build


OBJECTIVE_CASES = {f"objective:{name}": objective_case(name) for name in ("adv", "smart", "alice")}
ALL_CASES = {**OP_CASES, **OBJECTIVE_CASES}


@dataclass
class CheckResult:
    name: str
    trials: int
    failures: int
    max_error: float
    seconds: float

    @property
    def passed(self) -> bool:
        return self.failures == 0

    def to_dict(self) -> dict:
        return {"name": self.name, "trials": self.trials, "failures": self.failures,
                "max_error": self.max_error, "passed": self.passed}


def check_case(name: str, trials: int = 100, seed: int = 0, h: float = 1e-5,
               tol: float = 1e-4) -> CheckResult:
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    build = ALL_CASES[name]
    start = time.perf_counter()
    failures, worst = 0, 0.0
    for _ in range(trials):
        f, x = build(rng)
        report = grad_check(f, x, h=h, tol=tol)
        worst = max(worst, report.max_error)
        failures += not report.passed
    return CheckResult(name, trials, failures, worst, time.perf_counter() - start)


def run_suite(trials: int = 100, seed: int = 0, h: float = 1e-5, tol: float = 1e-4,
              names=None) -> list:
    return [check_case(n, trials, seed, h, tol) for n in (names or ALL_CASES)]
