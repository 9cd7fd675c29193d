import json

import numpy as np
import pytest

from embadv.adversarial import AdvConfig
from embadv.autodiff import Tensor
from embadv.metrics import (EvalReport, accuracy, default_attack, evaluate, exact_match, f1_overlap,
                            robust_accuracy)
from embadv.model import ModelParams, TaskKind, TokenBatch

from conftest import tiny_dataset, tiny_params


class TestAccuracy:
    def test_fixtures(self):
        assert accuracy([1, 0, 1], [1, 0, 1]) == 1.0
        assert accuracy([1, 1], [0, 0]) == 0.0
        assert accuracy([0, 1, 2, 3], [0, 1, 2, 0]) == 0.75

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            accuracy([1, 0], [1])


class TestExactMatch:
    def test_fixtures(self):
        assert exact_match([1, 0, 1], [1, 0, 1], [0, 0, 0]) == 1.0
        assert exact_match([1, 0, 0], [1, 0, 1], [0, 0, 0]) == 0.0
        assert exact_match([1, 0, 1, 1], [1, 0, 0, 1], [0, 0, 1, 1]) == 0.5

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            exact_match([], [], [])

    def test_not_above_accuracy(self, rng):
        # holds for equal-size groups, which is what the generator emits
        for _ in range(200):
            size, n_groups = rng.integers(1, 6, size=2)
            groups = np.repeat(np.arange(n_groups), size)
            preds, labels = rng.integers(0, 2, size=(2, len(groups)))
            assert exact_match(preds, labels, groups) <= accuracy(preds, labels)


class TestF1:
    def test_fixtures(self):
        assert f1_overlap([1, 1, 0], [1, 1, 0], [0, 0, 0]) == 1.0
        assert f1_overlap([1, 0], [1, 1], [0, 0]) == pytest.approx(2 / 3, abs=1e-15)
        assert f1_overlap([1, 0], [0, 1], [0, 0]) == 0.0
        assert f1_overlap([0, 0], [0, 0], [0, 0]) == 1.0
        assert f1_overlap([0, 1], [0, 0], [0, 0]) == 0.0

    def test_macro_average(self):
        # group 0: F1 1, group 1: F1 2/3, group 7: F1 0
        preds = [1, 0, 1, 0, 1]
        labels = [1, 0, 1, 1, 0]
        groups = [0, 0, 1, 1, 7]
        assert f1_overlap(preds, labels, groups) == pytest.approx((1 + 2 / 3 + 0) / 3, abs=1e-15)

    def test_matches_set_oracle(self, rng):
        for _ in range(200):
            n = rng.integers(1, 25)
            groups = rng.integers(0, 5, size=n)
            preds, labels = rng.integers(0, 2, size=(2, n))
            scores = []
            for g in np.unique(groups):
                idx = np.flatnonzero(groups == g)
                p = {i for i in idx if preds[i]}
                t = {i for i in idx if labels[i]}
                scores.append(1.0 if not p and not t else 2 * len(p & t) / (len(p) + len(t)))
            assert f1_overlap(preds, labels, groups) == pytest.approx(np.mean(scores), abs=1e-12)

    def test_order_invariance(self, rng):
        n = 40
        groups = rng.integers(0, 8, size=n)
        preds, labels = rng.integers(0, 2, size=(2, n))
        perm = rng.permutation(n)
        for fn in (exact_match, f1_overlap):
            assert fn(preds, labels, groups) == pytest.approx(
                fn(preds[perm], labels[perm], groups[perm]), abs=1e-15)
        assert accuracy(preds, labels) == accuracy(preds[perm], labels[perm])


def test_report_fields(kind):
    report = evaluate(tiny_params(), tiny_dataset(kind, n=8), default_attack(0.1))
    assert (report.em is not None) == (kind is TaskKind.PAIRWISE)
    assert (report.f1 is not None) == (kind is TaskKind.PAIRWISE)
    assert report.n_examples == 8
    d = json.loads(report.to_json())
    assert d["attack_config"]["steps"] == 5
    assert d["attack_config"]["step_size"] == pytest.approx(0.025)
    for key in ("accuracy", "robust_accuracy", "em", "f1"):
        assert d[key] is None or 0.0 <= d[key] <= 1.0


def test_pairwise_em_not_above_accuracy():
    report = evaluate(tiny_params(seed=2), tiny_dataset(TaskKind.PAIRWISE, n=30))
    assert report.em <= report.accuracy


def test_robust_equals_clean_at_zero_epsilon(kind):
    params, data = tiny_params(seed=4), tiny_dataset(kind, n=30)
    clean = evaluate(params, data).accuracy
    assert robust_accuracy(params, data, AdvConfig(epsilon=0.0, steps=5)) == clean


def test_robust_not_above_clean(kind):
    for seed in range(5):
        params, data = tiny_params(seed=seed, scale=3.0), tiny_dataset(kind, n=30, seed=seed)
        clean = evaluate(params, data).accuracy
        for eps in (0.01, 0.3, 2.0):
            assert robust_accuracy(params, data, default_attack(eps)) <= clean


def test_robust_order_invariance():
    params, data = tiny_params(seed=1, scale=2.0), tiny_dataset(n=20)
    shuffled = data.subset(np.random.default_rng(0).permutation(20))
    attack = default_attack(0.5)
    assert robust_accuracy(params, data, attack) == robust_accuracy(params, shuffled, attack)


def linear_1d(w0, w1, b0, b1):
    # one embedding dimension, no hidden layers: logits = (x + delta) * [w0, w1] + [b0, b1]
    return ModelParams(
        embedding=Tensor(np.linspace(-1, 1, 5)[:, None]),
        layers=[],
        head_rank=Tensor(np.zeros(1)),
        head_pair=Tensor([[w0, w1]]),
        head_pair_bias=Tensor([b0, b1]),
        dropout_rate=0.0,
    )


def grid_robust(params, batch, eps, points=201):
    x = params.embedding.data[batch.tokens[:, 0], 0]
    w = params.head_pair.data[0]
    b = params.head_pair_bias.data
    ok = np.ones(len(x), dtype=bool)
    for d in np.linspace(-eps, eps, points):
        logits = np.outer(x + d, w) + b
        ok &= logits.argmax(-1) == batch.labels
    return float(np.mean(ok))


def test_one_dim_attack_matches_grid(rng):
    tokens = np.arange(5)[:, None]
    batch = TokenBatch(TaskKind.PAIRWISE, tokens, np.ones_like(tokens), [0, 1, 1, 0, 1], np.arange(5))
    for _ in range(50):
        params = linear_1d(*rng.normal(size=4))
        prev = 1.0
        for eps in (0.0, 0.05, 0.2, 0.5, 1.0, 3.0):
            expected = grid_robust(params, batch, eps)
            one_step = AdvConfig(epsilon=eps, step_size=eps if eps else None, steps=1)
            assert robust_accuracy(params, batch, one_step) == expected
            assert robust_accuracy(params, batch, default_attack(eps)) == expected
            assert expected <= prev
            prev = expected


def test_missing_labels_rejected():
    batch = TokenBatch(TaskKind.PAIRWISE, [[0]], [[1]], None, [0])
    with pytest.raises(ValueError):
        robust_accuracy(linear_1d(1, 1, 0, 0), batch, default_attack(0.1))


def test_report_round_trips_through_json():
    report = EvalReport(accuracy=0.5, n_examples=4, em=0.25, f1=0.5, robust_accuracy=0.25,
                        attack_config=default_attack(0.05))
    d = json.loads(report.to_json())
    assert d == report.to_dict() | {"attack_config": report.attack_config.to_dict()}
