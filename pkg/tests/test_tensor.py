import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gmcml import tensor as T
from gmcml.tensor import ComputationTape, TapeError, Tensor, backward, finite_diff_check


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


class TestElementwise:
    def test_add(self):
        np.testing.assert_array_equal(T.add([1.0, 2.0], [3.0, 4.0]).data, [4.0, 6.0])

    def test_tanh_origin(self):
        assert T.tanh([0.0]).data[0] == 0.0

    def test_ln_of_e(self):
        assert T.ln([math.e]).data[0] == pytest.approx(1.0, abs=1e-15)

    def test_shape_mismatch_reports_both_shapes(self):
        with pytest.raises(ValueError, match=r"\(2,\).*\(3,\)"):
            T.add(np.ones(2), np.ones(3))

    def test_scalar_with_tensor_allowed(self):
        np.testing.assert_array_equal(T.mul(np.array(2.0), np.array([1.0, 3.0])).data, [2.0, 6.0])

    def test_ln_non_positive_rejected(self):
        with pytest.raises(ValueError, match="non-positive"):
            T.ln([1.0, 0.0])

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            T.elementwise("cosh", [1.0])

    @pytest.mark.parametrize("kind", ["neg", "square", "tanh", "exp", "relu", "sigmoid"])
    def test_unary_gradients(self, kind):
        rng = np.random.default_rng(1)
        x = rng.uniform(-2, 2, size=7)
        x[np.abs(x) < 0.05] = 0.3  # keep relu away from its kink
        w = rng.normal(size=7)
        err = finite_diff_check(lambda t: T.tsum(T.elementwise(kind, t) * w), x)
        assert err < 1e-6

    def test_ln_gradient(self):
        x = np.random.default_rng(2).uniform(0.5, 3, size=6)
        assert finite_diff_check(lambda t: T.tsum(T.ln(t)), x) < 1e-7

    @pytest.mark.parametrize("kind", ["add", "sub", "mul", "div", "max"])
    def test_binary_gradients(self, kind):
        rng = np.random.default_rng(3)
        a = rng.uniform(0.5, 2, size=5)
        b = rng.uniform(0.5, 2, size=5) + 0.1
        w = rng.normal(size=5)
        assert finite_diff_check(lambda t: T.tsum(T.elementwise(kind, t, b) * w), a) < 1e-6
        assert finite_diff_check(lambda t: T.tsum(T.elementwise(kind, a, t) * w), b) < 1e-6

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float64, 6, elements=st.floats(-10, 10)))
    def test_finite_on_bounded_inputs(self, x):
        t = leaf(x)
        y = T.tsum(T.tanh(t) * T.sigmoid(t) + T.square(t) + T.relu(t))
        backward(y)
        assert np.isfinite(y.data).all() and np.isfinite(t.grad).all()


class TestMatmul:
    def test_identity(self):
        b = np.array([[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_array_equal(T.matmul(np.eye(2), b).data, b)

    def test_arithmetic(self):
        assert T.matmul([[1.0, 2.0]], [[3.0], [4.0]]).data.tolist() == [[11.0]]

    def test_inner_mismatch(self):
        with pytest.raises(ValueError):
            T.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_gradient(self):
        rng = np.random.default_rng(4)
        b = rng.normal(size=(4, 3))
        assert finite_diff_check(lambda a: T.tsum(T.matmul(a, b)), rng.normal(size=(2, 4))) < 1e-5


class TestConv:
    def test_scalar_product(self):
        out = T.conv2d(np.array([[[2.0]]]), np.array([[[[3.0]]]]))
        assert out.data.tolist() == [[[6.0]]]

    def test_sum(self):
        out = T.conv2d(np.ones((1, 3, 3)), np.ones((1, 1, 3, 3)))
        assert out.data.tolist() == [[[9.0]]]

    def test_cross_correlation_no_flip(self):
        x = np.arange(9.0).reshape(1, 3, 3)
        k = np.zeros((1, 1, 3, 3))
        k[0, 0, 0, 0] = 1.0
        assert T.conv2d(x, k).data.item() == 0.0

    def test_non_integral_extent(self):
        with pytest.raises(ValueError, match="non-integral"):
            T.conv2d(np.ones((1, 4, 4)), np.ones((1, 1, 3, 3)), stride=2)

    def test_kernel_size_restricted(self):
        with pytest.raises(ValueError):
            T.conv2d(np.ones((1, 5, 5)), np.ones((1, 1, 5, 5)))

    def test_kernel_gradient(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(2, 4, 4))
        w = rng.normal(size=(3, 4, 4))
        err = finite_diff_check(lambda k: T.tsum(T.conv2d(x, k, pad=1) * w), rng.normal(size=(3, 2, 3, 3)))
        assert err < 1e-4

    @pytest.mark.parametrize("stride,pad,ksize", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1)])
    def test_input_gradient(self, stride, pad, ksize):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(2, 2, 5, 5))
        k = rng.normal(size=(3, 2, ksize, ksize))
        out_shape = T.conv2d(x, k, stride=stride, pad=pad).shape
        w = rng.normal(size=out_shape)
        assert finite_diff_check(lambda t: T.tsum(T.conv2d(t, k, stride=stride, pad=pad) * w), x) < 1e-5

    def test_matches_direct_loop(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 6, 6))
        k = rng.normal(size=(3, 2, 3, 3))
        out = T.conv2d(x, k, stride=1, pad=1).data
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
        ref = np.zeros((3, 6, 6))
        for o in range(3):
            for i in range(6):
                for j in range(6):
                    ref[o, i, j] = (xp[:, i : i + 3, j : j + 3] * k[o]).sum()
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


class TestStructural:
    def test_pool_shapes_and_values(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        assert T.max_pool2d(x).data.tolist() == [[[[5.0, 7.0], [13.0, 15.0]]]]
        assert T.avg_pool2d(x).data.tolist() == [[[[2.5, 4.5], [10.5, 12.5]]]]

    @pytest.mark.parametrize("op", [T.max_pool2d, T.avg_pool2d, T.upsample2x, T.global_avg_pool])
    def test_gradients(self, op):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(2, 3, 4, 4))
        w = rng.normal(size=op(x).shape)
        assert finite_diff_check(lambda t: T.tsum(op(t) * w), x) < 1e-6

    def test_concat_take_reshape(self):
        rng = np.random.default_rng(9)
        b = rng.normal(size=(2, 3))
        idx = np.array([0, 2, 2, 1])
        f = lambda t: T.tsum(T.square(T.take(T.reshape(T.concat([t, b], axis=0), (4, 3)), idx)))
        assert finite_diff_check(f, rng.normal(size=(2, 3))) < 1e-6

    def test_clamp_passes_gradient_inside_only(self):
        t = leaf([-2.0, 0.5, 2.0])
        backward(T.tsum(T.clamp(t, -1.0, 1.0)))
        assert t.grad.tolist() == [0.0, 1.0, 0.0]


class TestBackward:
    def test_square(self):
        x = leaf(3.0)
        backward(T.square(x))
        assert x.grad == 6.0

    def test_tanh_origin(self):
        x = leaf(0.0)
        backward(T.tanh(x))
        assert x.grad == 1.0

    def test_non_scalar_rejected(self):
        with pytest.raises(ValueError):
            backward(T.square(leaf([1.0, 2.0])))

    def test_single_use_tape(self):
        x = leaf(2.0)
        y = T.square(x)
        backward(y)
        with pytest.raises(TapeError):
            backward(y)

    def test_topological_order(self):
        x = leaf([1.0, 2.0])
        h = T.tanh(x)
        y = T.tsum(h * h + x)
        tape = ComputationTape(y)
        seen = set()
        for node in tape:
            for p in node._parents:
                assert id(p) in seen or p.is_leaf
            seen.add(id(node))

    def test_shared_subexpression_accumulates(self):
        x = leaf(1.5)
        y = x * x + x
        backward(y)
        assert x.grad == pytest.approx(2 * 1.5 + 1)

    def test_two_layer_net(self):
        rng = np.random.default_rng(10)
        w1 = rng.normal(size=(5, 4))
        w2 = rng.normal(size=(4, 1))
        x = rng.normal(size=(3, 5))

        def net(w):
            h = T.tanh(T.matmul(x, w))
            return T.tsum(T.square(T.matmul(h, w2)))

        assert finite_diff_check(net, w1) < 1e-4

    def test_no_grad_records_nothing(self):
        x = leaf(1.0)
        with T.no_grad():
            y = x * 2.0
        assert not y.requires_grad


class TestFiniteDiff:
    # Central differences are exact for quadratics at any step, so a unit step
    # removes truncation error entirely and leaves only the rounding of f.
    # Coordinates are either exactly zero or large enough that their gradient
    # stands clear of that rounding.
    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, 5, elements=st.one_of(st.just(0.0), st.floats(1e-2, 10), st.floats(-10, -1e-2))))
    def test_sum_of_squares(self, x):
        assert finite_diff_check(lambda t: T.tsum(T.square(t)), x, step=1.0) < 1e-8

    def test_sum_of_squares_default_step(self):
        x = np.random.default_rng(12).uniform(-3, 3, size=20)
        assert finite_diff_check(lambda t: T.tsum(T.square(t)), x) < 1e-8

    def test_detects_wrong_rule(self):
        def bad_square(t):
            return Tensor.from_op(t.data**2, (t,), lambda g: (3.0 * t.data * g,))

        assert finite_diff_check(lambda t: T.tsum(bad_square(t)), np.array([0.7, -1.2])) > 1e-2

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            finite_diff_check(lambda t: T.tsum(t) * np.inf, np.ones(2))

    def test_step_must_be_positive(self):
        with pytest.raises(ValueError):
            finite_diff_check(lambda t: T.tsum(t), np.ones(2), step=0)

    def test_coordinate_subset(self):
        x = np.random.default_rng(11).normal(size=50)
        assert finite_diff_check(lambda t: T.tsum(T.tanh(t)), x, coords=5) < 1e-7
