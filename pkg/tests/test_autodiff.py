import math
import numpy as np
import pytest

from embadv import autodiff as ad
from embadv.autodiff import Tensor, backward, grad_check
from embadv.gradcheck import OBJECTIVE_CASES, OP_CASES as OPS, check_case, run_suite


@pytest.mark.parametrize("op", sorted(OPS))
def test_op_gradients_match_finite_differences(op):
    result = check_case(op, trials=100)
    assert result.passed, (op, result.failures, result.max_error)


@pytest.mark.parametrize("case", sorted(OBJECTIVE_CASES))
def test_objective_gradients_match_finite_differences(case):
    result = check_case(case, trials=100)
    assert result.passed, (case, result.failures, result.max_error)


def test_suite_covers_every_case_and_is_seeded():
    a = run_suite(trials=2, seed=3, names=["tanh", "objective:alice"])
    b = run_suite(trials=2, seed=3, names=["tanh", "objective:alice"])
    assert [r.max_error for r in a] == [r.max_error for r in b]
    assert all(r.trials == 2 for r in a)


def test_matmul_example():
    out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[1.0], [1.0]])
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_log_softmax_symmetric():
    out = ad.log_softmax(Tensor([0.0, 0.0]))
    np.testing.assert_allclose(out.data, [-math.log(2), -math.log(2)], rtol=0, atol=1e-15)


def test_relu_gate_backward():
    x = Tensor([-1.0, 2.0], requires_grad=True)
    backward(ad.relu(x).sum())
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_square_derivative():
    x = Tensor(3.0, requires_grad=True)
    backward(x * x)
    assert x.grad == 6.0


def test_nll_gradient_closed_form():
    logits = np.array([0.3, -1.2, 2.0])
    x = Tensor(logits, requires_grad=True)
    backward(-(ad.log_softmax(x) * Tensor([0.0, 1.0, 0.0])).sum())
    p = np.exp(logits) / np.exp(logits).sum()
    np.testing.assert_allclose(x.grad, p - np.array([0.0, 1.0, 0.0]), atol=1e-15)


def test_repeated_backward_accumulates():
    x = Tensor(2.0, requires_grad=True)
    backward(x * x)
    backward(x * x)
    assert x.grad == 8.0


def test_random_two_layer_net_every_leaf():
    rng = np.random.default_rng(11)
    for _ in range(20):
        n, d, h, c = rng.integers(1, 5, size=4) + 1
        vals = {
            "x": rng.normal(size=(n, d)),
            "w1": rng.normal(size=(d, h)),
            "b1": rng.normal(size=h),
            "w2": rng.normal(size=(h, c)),
        }
        onehot = np.eye(c)[rng.integers(0, c, size=n)]

        def net(**t):
            hidden = ad.tanh(t["x"] @ t["w1"] + t["b1"])
            return -(ad.log_softmax(hidden @ t["w2"]) * Tensor(onehot)).sum()

        for leaf in vals:
            def f(v, leaf=leaf):
                args = {k: Tensor(a) for k, a in vals.items()}
                args[leaf] = v
                return net(**args)
            assert grad_check(f, vals[leaf], h=1e-5, tol=1e-4).passed


class TestGradCheck:
    def test_constant_gradient_exact(self):
        rep = grad_check(lambda t: t.sum(), np.random.default_rng(0).normal(size=(3, 4)))
        assert rep.max_error < 1e-9
        np.testing.assert_array_equal(rep.analytic, np.ones((3, 4)))

    def test_wrong_backward_rule_fails(self):
        def bad_square(t):
            return ad.make_op("bad_square", t.data ** 2, (t,), lambda g: (g * t.data,))

        rep = grad_check(lambda t: bad_square(t).sum(), np.array([1.0, -2.0, 0.5]))
        assert not rep.passed

    def test_non_scalar_rejected(self):
        with pytest.raises(ad.ShapeError):
            grad_check(lambda t: t * 2.0, np.ones(3))

    def test_tiny_gradients_compared_absolutely(self):
        rep = grad_check(lambda t: (t * 1e-12).sum(), np.ones(2))
        assert rep.passed


class TestInvariants:
    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            z = rng.normal(scale=10.0, size=(5, int(rng.integers(2, 9))))
            s = ad.softmax(Tensor(z)).data
            assert np.max(np.abs(s.sum(-1) - 1.0)) <= 1e-12
            np.testing.assert_allclose(np.exp(ad.log_softmax(Tensor(z)).data), s, rtol=0, atol=1e-12)

    def test_log_softmax_stable_for_large_logits(self):
        out = ad.log_softmax(Tensor([1000.0, 0.0])).data
        assert np.all(np.isfinite(out))
        assert out[0] == 0.0

    def test_backward_deterministic(self):
        rng = np.random.default_rng(5)
        x0, w = rng.normal(size=(4, 3)), rng.normal(size=(3, 2))
        grads = []
        for _ in range(2):
            x = Tensor(x0, requires_grad=True)
            backward(ad.log_softmax(ad.tanh(x @ Tensor(w))).sum())
            grads.append(x.grad.tobytes())
        assert grads[0] == grads[1]

    def test_linearity(self):
        rng = np.random.default_rng(6)
        x0 = rng.normal(size=(3, 4))

        def f(t):
            return ad.tanh(t).sum()

        def g(t):
            return (ad.log_softmax(t) * t).sum()

        def grad_of(fn):
            x = Tensor(x0, requires_grad=True)
            backward(fn(x))
            return x.grad

        a, b = 1.7, -0.3
        combined = grad_of(lambda t: f(t) * a + g(t) * b)
        np.testing.assert_allclose(combined, a * grad_of(f) + b * grad_of(g), rtol=0, atol=1e-12)


class TestErrors:
    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(3, 2\)"):
            Tensor(np.ones((2, 3))) + Tensor(np.ones((3, 2)))

    def test_matmul_mismatch(self):
        with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))

    def test_log_non_positive_rejected(self):
        with pytest.raises(ValueError):
            ad.log(Tensor([1.0, 0.0]))

    def test_non_scalar_backward_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ad.ShapeError):
            backward(x * 2.0)

    def test_gather_out_of_range(self):
        with pytest.raises(IndexError):
            ad.gather(Tensor(np.ones((3, 2))), np.array([0, 3]))


def test_tape_visits_each_node_once_in_topological_order():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = x * x
    z = (y + y).sum()
    tape = ad.Tape.record(z)
    ids = [id(t) for t in tape.tensors]
    assert len(ids) == len(set(ids))
    position = {id(t): i for i, t in enumerate(tape.tensors)}
    for t in tape.tensors:
        if t.node is not None:
            assert all(position[id(i)] < position[id(t)] for i in t.node.inputs)
