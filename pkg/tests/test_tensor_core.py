import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from avfusion import tensor_core as tc
from avfusion.errors import AxisOutOfRange, NonFiniteInput, RankError, ShapeMismatch


def rand(shape, seed=0):
    return np.random.default_rng(seed).uniform(-1, 1, shape)


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(tc.matmul(np.eye(2), a), a)

    def test_hand_computed(self):
        out = tc.matmul([[1.0, 2.0], [3.0, 4.0]], [[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_array_equal(out, [[19.0, 22.0], [43.0, 50.0]])

    def test_zero(self):
        out = tc.matmul(np.zeros((2, 3)), rand((3, 4)))
        assert out.shape == (2, 4)
        assert not out.any()

    def test_inner_dim_mismatch(self):
        with pytest.raises(ShapeMismatch):
            tc.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_batched_matches_loop(self):
        a, b = rand((3, 4, 5), 1), rand((5, 2), 2)
        out = tc.matmul(a, b)
        for i in range(3):
            np.testing.assert_array_equal(out[i], tc.matmul(a[i], b))

    @pytest.mark.parametrize("seed", range(10))
    def test_associative(self, seed):
        rng = np.random.default_rng(seed)
        m, k, n, p = rng.integers(1, 8, size=4)
        a, b, c = rand((m, k), seed), rand((k, n), seed + 100), rand((n, p), seed + 200)
        left = tc.matmul(tc.matmul(a, b), c)
        right = tc.matmul(a, tc.matmul(b, c))
        np.testing.assert_allclose(left, right, rtol=1e-9, atol=1e-12)

    def test_rows_independent_of_batch(self):
        x, w = rand((7, 33), 3), rand((33, 5), 4)
        full = tc.matmul(x, w)
        for i in range(7):
            np.testing.assert_array_equal(full[i : i + 1], tc.matmul(x[i : i + 1], w))

    def test_result_is_read_only(self):
        out = tc.matmul(np.eye(2), np.eye(2))
        with pytest.raises(ValueError):
            out[0, 0] = 5.0


class TestTranspose:
    def test_single_row(self):
        np.testing.assert_array_equal(tc.transpose([[1.0, 2.0, 3.0]]), [[1.0], [2.0], [3.0]])

    def test_hand_computed(self):
        np.testing.assert_array_equal(tc.transpose([[1.0, 2.0], [3.0, 4.0]]), [[1.0, 3.0], [2.0, 4.0]])

    def test_involution_bitwise(self):
        a = rand((4, 7))
        assert tc.transpose(tc.transpose(a)).tobytes() == a.tobytes()

    def test_rank_error(self):
        with pytest.raises(RankError):
            tc.transpose(np.ones(3))


class TestSoftmax:
    def test_constant_row(self):
        np.testing.assert_allclose(tc.softmax_rows([[2.5, 2.5, 2.5]]), [[1 / 3] * 3], atol=1e-15)

    def test_ln2(self):
        np.testing.assert_allclose(tc.softmax_rows([[0.0, math.log(2.0)]]), [[1 / 3, 2 / 3]], atol=1e-15)

    def test_large_values_stable(self):
        out = tc.softmax_rows([[1000.0, 1000.0]])
        np.testing.assert_array_equal(out, [[0.5, 0.5]])

    def test_non_finite(self):
        with pytest.raises(NonFiniteInput):
            tc.softmax_rows([[0.0, np.nan]])

    def test_permuting_a_row_permutes_output_bitwise(self):
        a = rand((3, 9), 5)
        perm = np.random.default_rng(1).permutation(9)
        np.testing.assert_array_equal(tc.softmax_rows(a)[:, perm], tc.softmax_rows(a[:, perm]))

    @settings(max_examples=200, deadline=None)
    @given(
        arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 8)), elements=st.floats(-50, 50)),
        st.floats(-100, 100),
    )
    def test_rows_sum_to_one_and_shift_invariant(self, a, c):
        s = np.asarray(tc.softmax_rows(a))
        np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(tc.softmax_rows(a + c), s, atol=1e-12)
        # monotone order preserved within each row
        for row_in, row_out in zip(a, s):
            order = np.argsort(row_in, kind="stable")
            assert np.all(np.diff(row_out[order]) >= 0)


class TestElementwiseAndReduce:
    def test_identities(self):
        a = rand((2, 3))
        np.testing.assert_array_equal(tc.elementwise(a, np.zeros((2, 3)), "add"), a)
        np.testing.assert_array_equal(tc.elementwise(a, np.ones((2, 3)), "mul"), a)
        np.testing.assert_array_equal(tc.scale(a, 1.0), a)

    def test_hand_add(self):
        np.testing.assert_array_equal(tc.elementwise([1.0, 2.0], [3.0, 4.0], "add"), [4.0, 6.0])

    def test_scalar_broadcast_only(self):
        np.testing.assert_array_equal(tc.elementwise([1.0, 2.0], 1.0, "sub"), [0.0, 1.0])
        with pytest.raises(ShapeMismatch):
            tc.elementwise(np.ones((2, 3)), np.ones(3), "add")

    def test_reduce(self):
        assert float(tc.reduce([1.0, 2.0, 3.0], "sum")) == 6.0
        assert float(tc.reduce(np.zeros((2, 2)), "mean")) == 0.0
        a = rand((3, 4))
        np.testing.assert_allclose(tc.reduce(a, "mean", 1), np.asarray(tc.reduce(a, "sum", 1)) / 4)

    def test_axis_out_of_range(self):
        with pytest.raises(AxisOutOfRange):
            tc.reduce(np.ones((2, 2)), "sum", axis=2)

    def test_as_tensor_validation(self):
        with pytest.raises(RankError):
            tc.as_tensor(np.ones((1, 1, 1, 1)))
        with pytest.raises(NonFiniteInput):
            tc.as_tensor([1.0, np.inf])
        t = tc.as_tensor([[1, 2]])
        assert t.dtype == np.float64 and not t.flags.writeable


finite = st.floats(-1e3, 1e3)


@settings(max_examples=100, deadline=None)
@given(
    arrays(np.float64, (3, 4), elements=finite),
    arrays(np.float64, (4, 2), elements=finite),
    arrays(np.float64, (3, 4), elements=finite),
)
def test_no_op_returns_non_finite(a, b, c):
    outs = [
        tc.matmul(a, b),
        tc.transpose(a),
        tc.softmax_rows(a),
        tc.elementwise(a, c, "mul"),
        tc.scale(a, 3.0),
        tc.reduce(a, "mean", 0),
    ]
    for out in outs:
        assert np.all(np.isfinite(out))
