import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from unisumm import autodiff as ad
from unisumm.autodiff import Tensor, grad_check
from unisumm.errors import ContractError, DimensionError, StateError


@pytest.fixture
def rng():
    return np.random.default_rng(7)


class TestMatmul:
    def test_identity(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(ad.matmul(a, Tensor(np.eye(2))).data, a.data)

    def test_row_times_column(self):
        out = ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert out.data.tolist() == [[11.0]]

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(ad.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3])

    def test_large_logits_do_not_overflow(self):
        out = ad.softmax_rows(Tensor([[1000.0, 0.0]])).data
        assert np.all(np.isfinite(out))
        assert out[0, 0] == pytest.approx(1.0) and out[0, 1] == pytest.approx(0.0, abs=1e-300)

    def test_ln2_closed_form(self):
        out = ad.softmax_rows(Tensor([[math.log(2.0), 0.0]])).data
        np.testing.assert_allclose(out, [[2 / 3, 1 / 3]], rtol=0, atol=1e-15)

    @settings(max_examples=200, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 9)),
                  elements=st.floats(-1e3, 1e3)))
    def test_rows_sum_to_one(self, x):
        out = ad.softmax_rows(Tensor(x)).data
        assert np.all(out >= 0)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


class TestCrossEntropy:
    def test_uniform_two_class(self):
        assert ad.cross_entropy(Tensor([[0.0, 0.0]]), [0]).item() == pytest.approx(math.log(2))

    def test_confident_correct_goes_to_zero(self):
        assert ad.cross_entropy(Tensor([[50.0, 0.0, 0.0]]), [0]).item() < 1e-20

    def test_direct_softmax_value(self):
        expected = -math.log(math.e / (math.e + 2))
        assert expected == pytest.approx(0.551444, abs=1e-6)
        got = ad.cross_entropy(Tensor([[1.0, 0.0, 0.0]]), [0]).item()
        assert got == pytest.approx(expected, abs=1e-15)

    def test_padding_excluded_from_mean(self):
        logits = Tensor([[1.0, 0.0, 0.0], [5.0, -3.0, 2.0]])
        with pytest.raises(ContractError):
            ad.cross_entropy(logits, [0, 0], ignore_index=0)
        only_first = ad.cross_entropy(Tensor([[1.0, 0.0, 0.0]]), [1])
        both = ad.cross_entropy(logits, [1, 0], ignore_index=0)
        assert both.item() == only_first.item()

    def test_out_of_range_target(self):
        with pytest.raises(IndexError):
            ad.cross_entropy(Tensor([[0.0, 0.0]]), [2])


class TestBackward:
    def test_sum_gradient(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        ad.backward(ad.tsum(x))
        assert x.grad.tolist() == [1.0, 1.0, 1.0]

    def test_square_gradient(self):
        x = Tensor(3.0, requires_grad=True)
        ad.backward(ad.square(x))
        assert x.grad == 6.0

    def test_non_scalar_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            ad.backward(x * 2.0)

    def test_second_backward_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        loss = ad.tsum(ad.square(x))
        ad.backward(loss)
        with pytest.raises(StateError):
            ad.backward(loss)

    def test_stale_leaf_grad_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        ad.backward(ad.tsum(x))
        with pytest.raises(StateError):
            ad.backward(ad.tsum(ad.square(x)))
        x.zero_grad()
        ad.backward(ad.tsum(ad.square(x)))
        assert x.grad.tolist() == [2.0, 4.0]

    def test_shared_subexpression_accumulates(self):
        x = Tensor([2.0], requires_grad=True)
        y = x * x
        ad.backward(ad.tsum(y + y * 3.0))
        assert x.grad.tolist() == [16.0]

    def test_tape_freed(self):
        x = Tensor([1.0], requires_grad=True)
        y = ad.square(x)
        loss = ad.tsum(y)
        ad.backward(loss)
        assert y._parents == () and y._backward is None


class TestGradCheck:
    def test_polynomial(self):
        assert grad_check(lambda x: ad.tsum(ad.square(x)), Tensor(3.0), 1e-4) <= 1e-6

    def test_cross_entropy(self, rng):
        targets = np.array([1, 3])
        err = grad_check(lambda z: ad.cross_entropy(z, targets), rng.normal(size=(2, 4)))
        assert err <= 1e-5

    def test_non_scalar_rejected(self):
        with pytest.raises(ContractError):
            grad_check(lambda x: x * 2.0, np.ones(3))

    @pytest.mark.parametrize("name", [
        "add", "mul", "matmul_a", "matmul_b", "batched_matmul", "softmax", "gelu", "exp",
        "layer_norm_x", "layer_norm_gamma", "concat", "broadcast", "transpose", "embedding",
        "mean", "take",
    ])
    def test_every_op(self, name, rng):
        other = rng.normal(size=(3, 4))
        w = rng.normal(size=(4, 2))
        gamma, beta = rng.normal(size=4), rng.normal(size=4)
        weights = rng.normal(size=(3, 4))
        ids = np.array([[0, 2], [1, 1]])
        cases = {
            "add": (lambda x: ad.tsum(ad.mul(ad.add(x, Tensor(other[0])), Tensor(weights))),
                    (3, 4)),
            "mul": (lambda x: ad.tsum(ad.mul(x, Tensor(other))), (3, 4)),
            "matmul_a": (lambda x: ad.tsum(ad.square(ad.matmul(x, Tensor(w)))), (3, 4)),
            "matmul_b": (lambda x: ad.tsum(ad.square(ad.matmul(Tensor(other), x))), (4, 2)),
            "batched_matmul": (
                lambda x: ad.tsum(ad.square(ad.matmul(x, Tensor(w)))), (2, 3, 4)),
            "softmax": (lambda x: ad.tsum(ad.mul(ad.softmax_rows(x), Tensor(weights))), (3, 4)),
            "gelu": (lambda x: ad.tsum(ad.mul(ad.gelu(x), Tensor(weights))), (3, 4)),
            "exp": (lambda x: ad.tsum(ad.exp(x)), (3, 4)),
            "layer_norm_x": (lambda x: ad.tsum(ad.mul(
                ad.layer_norm(x, Tensor(gamma), Tensor(beta)), Tensor(weights))), (3, 4)),
            "layer_norm_gamma": (lambda g: ad.tsum(ad.mul(
                ad.layer_norm(Tensor(other), g, Tensor(beta)), Tensor(weights))), (4,)),
            "concat": (lambda x: ad.tsum(ad.square(ad.concat([x, Tensor(other)], axis=0))),
                       (2, 4)),
            "broadcast": (lambda x: ad.tsum(ad.mul(ad.broadcast_to(x, (3, 4)),
                                                   Tensor(weights))), (1, 4)),
            "transpose": (lambda x: ad.tsum(ad.mul(ad.transpose(x, (1, 0)),
                                                   Tensor(weights))), (4, 3)),
            "embedding": (lambda x: ad.tsum(ad.square(ad.embedding(x, ids))), (3, 4)),
            "mean": (lambda x: ad.mean(ad.square(x), axis=1).sum(), (3, 4)),
            "take": (lambda x: ad.tsum(ad.square(x[1:, ::2])), (3, 4)),
        }
        f, shape = cases[name]
        assert grad_check(f, rng.normal(size=shape), eps=1e-4) <= 1e-4


def test_operations_are_deterministic(rng):
    x = rng.normal(size=(4, 5))

    def run():
        t = Tensor(x, requires_grad=True)
        loss = ad.cross_entropy(ad.matmul(ad.gelu(t), Tensor(np.ones((5, 3)))), [0, 1, 2, 0])
        ad.backward(loss)
        return loss.item(), t.grad.tobytes()

    assert run() == run()


def test_no_grad_skips_tape():
    x = Tensor([1.0], requires_grad=True)
    with ad.no_grad():
        y = ad.square(x)
    assert not y.requires_grad and y._parents == ()
