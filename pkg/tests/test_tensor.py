import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mimlab import tensor as T
from mimlab.tensor import GraphError, ShapeError, Tensor

from oracles import gelu_scalar, layer_norm_scalar, matmul_loops

finite = st.floats(-5, 5, allow_nan=False, allow_infinity=False)


class TestMatmul:
    def test_identity(self):
        a = np.random.default_rng(0).normal(size=(2, 2))
        np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), Tensor(a)).data, a)

    def test_against_loops(self):
        a, b = [[1, 2], [3, 4]], [[5, 6], [7, 8]]
        out = T.matmul(Tensor(np.array(a, float)), Tensor(np.array(b, float))).data
        assert out.tolist() == matmul_loops(a, b) == [[19, 22], [43, 50]]

    def test_shape_error_names_both(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    @settings(max_examples=25, deadline=None)
    @given(arrays(np.float64, (3, 4), elements=finite), arrays(np.float64, (4, 2), elements=finite))
    def test_random_against_loops(self, a, b):
        out = T.matmul(Tensor(a), Tensor(b)).data
        np.testing.assert_allclose(out, matmul_loops(a.tolist(), b.tolist()), atol=1e-12)


class TestSoftmax:
    def test_constant_slice(self):
        np.testing.assert_allclose(T.softmax(Tensor(np.full(4, 3.0))).data, 0.25, atol=1e-15)

    def test_log2_case(self):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, math.log(2.0)])).data, [1 / 3, 2 / 3], atol=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(arrays(np.float64, (3, 5), elements=finite), st.floats(-50, 50))
    def test_shift_invariance_and_rows(self, x, c):
        s = T.softmax(Tensor(x), axis=-1).data
        np.testing.assert_allclose(T.softmax(Tensor(x + c), axis=-1).data, s, atol=1e-12)
        np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)

    def test_invalid_axis(self):
        with pytest.raises((ValueError, IndexError)):
            T.softmax(Tensor(np.zeros((2, 3))), axis=5)


class TestLayerNorm:
    def test_constant_slice_gives_zeros(self):
        out = T.layer_norm(Tensor(np.full((2, 4), 7.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(out.data, 0.0)

    def test_already_normalized(self):
        out = T.layer_norm(Tensor([1.0, -1.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=0.0)
        np.testing.assert_allclose(out.data, [1.0, -1.0], atol=1e-15)

    def test_scalar_oracle(self):
        out = T.layer_norm(Tensor([0.0, 1.0, 2.0, 3.0]), Tensor(np.ones(4)), Tensor(np.zeros(4)), eps=1e-5)
        np.testing.assert_allclose(out.data, layer_norm_scalar([0, 1, 2, 3], 1e-5), atol=1e-14)

    def test_zero_mean_slices(self):
        x = np.random.default_rng(1).normal(size=(5, 8)) * 4 + 3
        g = np.random.default_rng(2).normal(size=8)
        out = T.layer_norm(Tensor(x), Tensor(g), Tensor(np.zeros(8))).data / g
        assert np.abs(out.mean(axis=-1)).max() < 1e-10


class TestGelu:
    def test_values(self):
        assert T.gelu(Tensor(0.0)).item() == 0.0
        assert abs(T.gelu(Tensor(10.0)).item() - 10.0) < 1e-9
        assert abs(T.gelu(Tensor(-1.0)).item() - gelu_scalar(-1.0)) < 1e-15
        # erf(1/sqrt 2) to 20 digits
        assert abs(T.gelu(Tensor(-1.0)).item() - (-0.5 * (1 - 0.68268949213708589717))) < 1e-15


class TestBackward:
    def test_sum_of_squares(self):
        x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_array_equal(x.grad, [2.0, -4.0, 6.0])

    def test_constant_root(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = Tensor(np.arange(3.0), requires_grad=True)
        (y.sum() + x.sum() * 0.0).backward()
        np.testing.assert_array_equal(x.grad, 0.0)

    def test_fan_out_accumulates(self):
        x0 = np.array([0.3, -1.2, 2.0])

        def f(x):
            a = T.exp(x)
            return (a * x).sum() + (a * a).sum()

        assert T.grad_check(f, [x0]) < 1e-8
        x = Tensor(x0, requires_grad=True)
        f(x).backward()
        e = np.exp(x0)
        np.testing.assert_allclose(x.grad, e * x0 + e + 2 * e * e, rtol=1e-13)

    def test_non_scalar_root(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(GraphError, match="scalar"):
            (x * 2.0).backward()

    def test_detached_root(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(GraphError):
            x.sum().detach().backward()

    def test_graph_freed_after_backward(self):
        x = Tensor(np.ones(3), requires_grad=True)
        y = (x * x).sum()
        y.backward()
        with pytest.raises(GraphError):
            y.backward()

    def test_no_grad_buffer_without_requires_grad(self):
        x = Tensor(np.ones(3))
        w = Tensor(np.ones(3), requires_grad=True)
        (x * w).sum().backward()
        assert x.grad is None and w.grad is not None

    def test_no_grad_context(self):
        w = Tensor(np.ones(3), requires_grad=True)
        with T.no_grad():
            y = (w * 2.0).sum()
        assert not y.requires_grad

    def test_stop_gradient(self):
        w = Tensor(np.ones(3), requires_grad=True)
        (T.stop_gradient(w) * w).sum().backward()
        np.testing.assert_array_equal(w.grad, 1.0)

    def test_getitem_repeated_index(self):
        x = Tensor(np.arange(4.0), requires_grad=True)
        x[np.array([1, 1, 3])].sum().backward()
        np.testing.assert_array_equal(x.grad, [0, 2, 0, 1])


class TestDebugMode:
    def test_nonfinite_detected(self):
        T.set_debug(True)
        try:
            with np.errstate(invalid="ignore"), pytest.raises(FloatingPointError):
                T.log(Tensor(np.array([-1.0])))
        finally:
            T.set_debug(False)


class TestGradCheck:
    def test_matmul_sum(self):
        rng = np.random.default_rng(3)
        err = T.grad_check(lambda a, b: T.matmul(a, b).sum(), [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))])
        assert err < 1e-6

    def test_layer_norm_sum(self):
        rng = np.random.default_rng(4)
        w = rng.normal(size=(2, 6))
        err = T.grad_check(lambda x, g, b: (T.layer_norm(x, g, b) * w).sum(),
                           [rng.normal(size=(2, 6)), rng.normal(size=6), rng.normal(size=6)])
        assert err < 1e-5

    def test_detects_wrong_gradient(self):
        def bad(x):
            # forward x^2, backward claims 3x
            return T._result(x.data ** 2, (x,), lambda g: (3 * x.data * g,)).sum()

        with pytest.raises(AssertionError):
            T.grad_check(bad, [np.array([1.0, 2.0])], tol=1e-4)

    def test_eps_bounds(self):
        with pytest.raises(ValueError):
            T.grad_check(lambda x: x.sum(), [np.ones(2)], eps=1e-2)
