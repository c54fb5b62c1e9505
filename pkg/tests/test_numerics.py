import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weakloc import numerics as nm
from weakloc.numerics import Tape, Tensor


def rand(rows, cols, seed=0, lo=-2.0, hi=2.0):
    rng = np.random.default_rng(seed)
    return rng.uniform(lo, hi, size=(rows, cols))


class TestForwardValues:
    def test_matmul_identity(self):
        eye = Tensor(np.eye(2))
        m = Tensor([[3.0, 4.0], [5.0, 6.0]])
        np.testing.assert_array_equal(nm.matmul(eye, m).data, m.data)

    def test_matmul_inner_product(self):
        out = nm.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        assert out.item() == 11.0

    def test_matmul_matches_triple_loop(self):
        a = rand(3, 4, seed=1)
        b = rand(4, 2, seed=2)
        ref = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    ref[i, j] += a[i, k] * b[k, j]
        np.testing.assert_allclose(nm.matmul(Tensor(a), Tensor(b)).data, ref, rtol=0, atol=1e-14)

    def test_matmul_shape_error_names_both_shapes(self):
        with pytest.raises(nm.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            nm.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_softmax_symmetry(self):
        out = nm.softmax_rows(Tensor([[0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[0.5, 0.5]], atol=1e-15)

    def test_softmax_large_entry_no_overflow(self):
        out = nm.softmax_rows(Tensor([[1000.0, 0.0]])).data
        assert np.isfinite(out).all()
        np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-12)

    def test_softmax_log_ratios(self):
        out = nm.softmax_rows(Tensor([[math.log(1), math.log(2), math.log(3)]]))
        np.testing.assert_allclose(out.data, [[1 / 6, 2 / 6, 3 / 6]], atol=1e-15)

    def test_sigmoid_values(self):
        assert nm.sigmoid(Tensor([[0.0]])).item() == 0.5
        assert nm.sigmoid(Tensor([[math.log(3)]])).item() == pytest.approx(0.75, abs=1e-15)

    def test_sigmoid_tail_never_zero(self):
        v = nm.sigmoid(Tensor([[-50.0]])).item()
        assert 0.0 < v <= 1e-20
        # even absurdly negative inputs stay strictly positive
        assert nm.sigmoid(Tensor([[-1e6]])).item() > 0.0
        assert nm.sigmoid(Tensor([[1e6]])).item() < 1.0

    def test_relu(self):
        np.testing.assert_array_equal(nm.relu(Tensor([[-1.0, 2.0]])).data, [[0.0, 2.0]])

    def test_concat_cols_order(self):
        a, b, c = Tensor(np.full((3, 2), 1.0)), Tensor(np.full((3, 1), 2.0)), Tensor(np.full((3, 2), 3.0))
        out = nm.concat_cols([a, b, c])
        assert out.shape == (3, 5)
        np.testing.assert_array_equal(out.data[0], [1, 1, 2, 3, 3])

    def test_l2_normalize(self):
        out = nm.l2_normalize_rows(Tensor([[3.0, 4.0]]))
        np.testing.assert_allclose(out.data, [[0.6, 0.8]], atol=1e-15)

    def test_l2_normalize_zero_row_stays_finite(self):
        out = nm.l2_normalize_rows(Tensor([[0.0, 0.0]]))
        np.testing.assert_array_equal(out.data, [[0.0, 0.0]])

    def test_add_bias_row(self):
        out = nm.add(Tensor(np.zeros((3, 2))), Tensor([[1.0, 2.0]]))
        np.testing.assert_array_equal(out.data, [[1, 2]] * 3)

    def test_add_rejects_other_broadcasts(self):
        with pytest.raises(nm.ShapeError):
            nm.add(Tensor(np.zeros((3, 2))), Tensor(np.zeros((3, 1))))

    def test_gather_rows(self):
        x = Tensor(np.arange(8.0).reshape(4, 2))
        out = nm.gather_rows(x, [3, 1])
        np.testing.assert_array_equal(out.data, [[6, 7], [2, 3]])

    def test_logsumexp_rows(self):
        x = rand(3, 5, seed=3)
        ref = np.log(np.exp(x).sum(axis=1, keepdims=True))
        np.testing.assert_allclose(nm.logsumexp_rows(Tensor(x)).data, ref, atol=1e-12)


class TestGradients:
    """Every primitive passes a central-difference check below 1e-6 on random input."""

    CASES = {
        "matmul_a": lambda x: nm.sum_all(nm.matmul(x, Tensor(rand(4, 3, seed=10)))),
        "matmul_b": lambda x: nm.sum_all(nm.matmul(Tensor(rand(5, 3, seed=11)), x)),
        "transpose": lambda x: nm.sum_all(nm.mul(nm.transpose(x), Tensor(rand(4, 3, seed=12)))),
        "add": lambda x: nm.sum_all(nm.sigmoid(nm.add(x, Tensor(rand(3, 4, seed=13))))),
        "add_bias": lambda x: nm.sum_all(nm.sigmoid(nm.add(Tensor(rand(5, 4, seed=14)), x))),
        "sub": lambda x: nm.sum_all(nm.mul(nm.sub(x, Tensor(rand(3, 4, seed=15))), x)),
        "mul": lambda x: nm.sum_all(nm.mul(x, Tensor(rand(3, 4, seed=16)))),
        "scale": lambda x: nm.sum_all(nm.scale(x, -2.5)),
        "relu": lambda x: nm.sum_all(nm.relu(x)),
        "sigmoid": lambda x: nm.sum_all(nm.sigmoid(x)),
        "softmax": lambda x: nm.sum_all(nm.mul(nm.softmax_rows(x), Tensor(rand(3, 4, seed=17)))),
        "l2_normalize": lambda x: nm.sum_all(nm.mul(nm.l2_normalize_rows(x), Tensor(rand(3, 4, seed=18)))),
        "logsumexp": lambda x: nm.sum_all(nm.logsumexp_rows(x)),
        "row_sums": lambda x: nm.sum_all(nm.sigmoid(nm.row_sums(x))),
        "mean_all": lambda x: nm.mean_all(nm.mul(x, x)),
        "slice_cols": lambda x: nm.sum_all(nm.mul(nm.slice_cols(x, 1, 3), Tensor(rand(3, 2, seed=19)))),
        "gather_rows": lambda x: nm.sum_all(nm.sigmoid(nm.gather_rows(x, [0, 2, 2]))),
        "concat_cols": lambda x: nm.sum_all(
            nm.sigmoid(nm.concat_cols([x, nm.relu(x)]))
        ),
        "concat_rows": lambda x: nm.sum_all(
            nm.sigmoid(nm.concat_rows([x, nm.scale(x, 0.5)]))
        ),
        "scale_rows": lambda x: nm.sum_all(
            nm.scale_rows(x, nm.sigmoid(nm.row_sums(x)))
        ),
    }

    @pytest.mark.parametrize("name", sorted(CASES))
    def test_primitive(self, name):
        shapes = {"matmul_a": (5, 4), "matmul_b": (3, 4), "transpose": (3, 4), "add_bias": (1, 4)}
        rows, cols = shapes.get(name, (3, 4))
        x = rand(rows, cols, seed=hash(name) % 2**16)
        assert nm.grad_check(self.CASES[name], x) < 1e-6

    def test_log_clamped_interior(self):
        x = rand(3, 4, seed=20, lo=0.05, hi=0.95)
        err = nm.grad_check(lambda t: nm.sum_all(nm.log_clamped(t)), x)
        assert err < 1e-6

    def test_sigmoid_grad_at_zero(self):
        tape = Tape()
        x = tape.leaf(np.zeros((2, 3)))
        nm.backward(nm.sum_all(nm.sigmoid(x)))
        np.testing.assert_allclose(x.grad, 0.25, atol=1e-15)
        assert nm.grad_check(lambda t: nm.sum_all(nm.sigmoid(t)), np.zeros((2, 3))) < 1e-6

    def test_softmax_sum_has_zero_gradient(self):
        # row sums are constant, so d(sum softmax)/dx vanishes
        x = rand(2, 5, seed=21)
        tape = Tape()
        leaf = tape.leaf(x)
        nm.backward(nm.sum_all(nm.softmax_rows(leaf)))
        np.testing.assert_allclose(leaf.grad, 0.0, atol=1e-12)
        assert nm.grad_check(lambda t: nm.sum_all(nm.softmax_rows(t)), x) < 1e-6


class TestTape:
    def test_unused_nodes_have_zero_adjoints(self):
        tape = Tape()
        x = tape.leaf(rand(2, 2, seed=30))
        used = nm.sigmoid(x)
        unused = nm.relu(x)  # noqa: F841 - recorded but not part of the loss
        nm.backward(nm.sum_all(used))
        np.testing.assert_array_equal(unused.grad, np.zeros((2, 2)))
        assert unused.grad is not None

    def test_gradient_accumulates_over_reuse(self):
        tape = Tape()
        x = tape.leaf(np.array([[1.0, 2.0]]))
        y = nm.sum_all(nm.add(x, x))
        nm.backward(y)
        np.testing.assert_array_equal(x.grad, [[2.0, 2.0]])

    def test_mixing_tapes_rejected(self):
        a = Tape().leaf(np.ones((1, 1)))
        b = Tape().leaf(np.ones((1, 1)))
        with pytest.raises(ValueError, match="tapes"):
            nm.add(a, b)

    def test_backward_requires_scalar(self):
        tape = Tape()
        x = tape.leaf(np.ones((2, 2)))
        with pytest.raises(nm.ShapeError):
            nm.backward(nm.sigmoid(x))

    def test_check_finite_names_op(self):
        tape = Tape()
        x = tape.leaf(np.array([[1e308]]))
        with np.errstate(over="ignore"):
            nm.add(x, x)  # overflows to inf
        with pytest.raises(nm.NumericError, match="add"):
            nm.check_finite(tape)

    def test_forward_deterministic(self):
        x = rand(6, 6, seed=31)
        a = nm.softmax_rows(nm.matmul(Tensor(x), Tensor(x))).data
        b = nm.softmax_rows(nm.matmul(Tensor(x), Tensor(x))).data
        assert (a == b).all()


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_softmax_rows_sum_to_one(rows, cols, seed):
    x = rand(rows, cols, seed=seed, lo=-30, hi=30)
    out = nm.softmax_rows(Tensor(x)).data
    assert (out >= 0).all()
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_sigmoid_open_interval(rows, cols, seed):
    x = rand(rows, cols, seed=seed, lo=-60, hi=60)
    out = nm.sigmoid(Tensor(x)).data
    assert (out > 0).all() and (out < 1).all()


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_normalize_unit_rows(rows, cols, seed):
    x = rand(rows, cols, seed=seed)
    out = nm.l2_normalize_rows(Tensor(x)).data
    norms = np.linalg.norm(x, axis=1)
    expected = np.where(norms > 1e-6, 1.0, norms / 1e-12)
    got = np.linalg.norm(out, axis=1)
    np.testing.assert_allclose(got[norms > 1e-6], 1.0, atol=1e-6)
