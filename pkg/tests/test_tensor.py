"""Gradient, broadcasting and tape-semantics checks for the tensor engine."""

import numpy as np
import pytest
import sympy
from hypothesis import given, settings
from hypothesis import strategies as st

from gatevit import tensor as T
from gatevit.errors import DomainError, ShapeError

from conftest import analytic_grads, check_grads, rel_err


class TestGradients:
    """Every differentiable op against central finite differences:
    rel. err < 1e-6 at float64, < 1e-4 at float32."""

    def test_add_broadcast(self, rng):
        a, b = rng.normal(size=(3, 4)), rng.normal(size=(4,))
        check_grads(lambda x, y: T.tsum(T.mul(T.add(x, y), T.add(x, y))), [a, b])

    def test_sub_scalar_operand(self, rng):
        a = rng.normal(size=(2, 3))
        check_grads(lambda x: T.tsum(T.mul(T.sub(1.0, x), T.sub(1.0, x))), [a])

    def test_mul_broadcast_axes(self, rng):
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 1, 4))
        check_grads(lambda x, y: T.tsum(T.mul(x, y)), [a, b])

    def test_matmul(self, rng):
        a, b = rng.normal(size=(3, 3)), rng.normal(size=(3, 3))
        check_grads(lambda x, y: T.tsum(T.matmul(x, y)), [a, b])

    def test_matmul_batched(self, rng):
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
        check_grads(lambda x, y: T.tsum(T.mul(T.matmul(x, y),
                                              T.matmul(x, y))), [a, b])

    def test_softmax_jacobian(self, rng):
        x = rng.normal(size=(5,)).reshape(1, 5)
        w = rng.normal(size=(5,)).reshape(1, 5)
        check_grads(lambda a, b: T.tsum(T.mul(T.softmax(a, axis=-1), b)), [x, w])

    def test_softmax_other_axis(self, rng):
        x, w = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
        check_grads(lambda a, b: T.tsum(T.mul(T.softmax(a, axis=0), b)), [x, w])

    def test_sigmoid(self, rng):
        x = rng.normal(size=(7,)) * 2
        check_grads(lambda a: T.tsum(T.mul(T.sigmoid(a), T.sigmoid(a))), [x])

    def test_gelu(self, rng):
        x = rng.normal(size=(9,)) * 2
        check_grads(lambda a: T.tsum(T.mul(T.gelu(a), T.gelu(a))), [x])

    def test_exp_log(self, rng):
        x = rng.uniform(0.5, 2.0, size=(6,))
        check_grads(lambda a: T.tsum(T.mul(T.log(a), T.exp(a))), [x])

    def test_layernorm(self, rng):
        x = rng.normal(size=(3, 5))
        g = rng.normal(size=(5,)) + 1.0
        b = rng.normal(size=(5,))
        check_grads(lambda a, gg, bb: T.tsum(
            T.mul(T.layernorm(a, gg, bb), T.layernorm(a, gg, bb))), [x, g, b])

    def test_shape_ops(self, rng):
        a = rng.normal(size=(2, 3, 4))
        w = rng.normal(size=(4, 3, 2))

        def build(x, y):
            t = T.transpose(T.reshape(x, (4, 3, 2)), (2, 1, 0))
            return T.tsum(T.mul(t, T.transpose(y, (2, 1, 0))))
        check_grads(build, [a, w])

    def test_concat_slice(self, rng):
        a, b = rng.normal(size=(2, 3)), rng.normal(size=(2, 2))

        def build(x, y):
            c = T.concat([x, y], axis=1)
            return T.tsum(T.mul(T.slice_axis(c, 1, 1, 4),
                                T.slice_axis(c, 1, 1, 4)))
        check_grads(build, [a, b])

    def test_mask_ops(self, rng):
        a = rng.normal(size=(4, 3))
        mask = np.array([1, 0, 1, 1], dtype=bool)
        check_grads(lambda x: T.tsum(T.mul(T.mask_select(x, mask),
                                           T.mask_select(x, mask))), [a])
        zmask = np.array([[1.0, 0.0, 1.0]])
        check_grads(lambda x: T.tsum(T.mul(T.zero_mask(x, zmask), x)), [a])

    def test_tile_and_reductions(self, rng):
        a = rng.normal(size=(2, 3))
        check_grads(lambda x: T.tmean(T.mul(T.tile_leading(x, 4),
                                            T.tile_leading(x, 4))), [a])
        check_grads(lambda x: T.tsum(T.mul(T.tsum(x, axis=0),
                                           T.tsum(x, axis=0))), [a])

    def test_clamp_interior(self, rng):
        x = rng.uniform(-0.4, 0.4, size=(6,))
        check_grads(lambda a: T.tsum(T.mul(T.clamp(a, -0.5, 0.5), a)), [x])

    def test_straight_through_passes_gradient(self, rng):
        x = rng.uniform(0.1, 0.9, size=(5,))
        g, _ = analytic_grads(
            lambda a: T.tsum(T.mul(T.straight_through_hard(a), a)),
            [x], np.float64)
        # forward is hard, backward treats the op as identity:
        # d/dx sum(hard(x) * x) = hard(x) + x
        hard = (x >= 0.5).astype(np.float64)
        np.testing.assert_allclose(g[0], hard + x, rtol=1e-12)


class TestSoftmaxProperties:
    def test_uniform(self):
        y = T.softmax(T.Tensor([0.0, 0.0, 0.0], dtype=np.float64), axis=-1)
        np.testing.assert_allclose(y.data, np.full(3, 1 / 3), atol=1e-12)

    def test_saturation_no_overflow(self):
        y = T.softmax(T.Tensor([1000.0, 0.0, 0.0], dtype=np.float32), axis=-1)
        assert np.all(np.isfinite(y.data))
        np.testing.assert_allclose(y.data, [1.0, 0.0, 0.0], atol=1e-6)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(min_value=-1e4, max_value=1e4), min_size=2,
                    max_size=8), st.sampled_from([np.float32, np.float64]))
    def test_rows_sum_to_one(self, vals, dtype):
        y = T.softmax(T.Tensor(np.array([vals]), dtype=dtype), axis=-1)
        assert abs(y.data.sum() - 1.0) < 1e-6
        assert np.all(y.data >= 0)


class TestTapeSemantics:
    def test_shared_subexpression_accumulates(self):
        """Adjoint accumulation on a reused node, against symbolic
        differentiation of the identical expression."""
        sa, sb = sympy.symbols("a b")
        se = sa * sb
        sloss = se + se * sa + se * se
        ref_a = sympy.lambdify((sa, sb), sympy.diff(sloss, sa))
        ref_b = sympy.lambdify((sa, sb), sympy.diff(sloss, sb))

        a = T.Tensor([1.7], requires_grad=True, dtype=np.float64)
        b = T.Tensor([-0.6], requires_grad=True, dtype=np.float64)
        with T.Tape() as tape:
            e = T.mul(a, b)
            loss = T.tsum(T.add(T.add(e, T.mul(e, a)), T.mul(e, e)))
            tape.backward(loss)
        np.testing.assert_allclose(a.grad, [ref_a(1.7, -0.6)], rtol=1e-12)
        np.testing.assert_allclose(b.grad, [ref_b(1.7, -0.6)], rtol=1e-12)

    def test_backward_bitwise_reproducible(self, rng):
        vals = rng.normal(size=(4, 4))

        def run():
            x = T.Tensor(vals, requires_grad=True, dtype=np.float32)
            with T.Tape() as tape:
                y = T.matmul(T.softmax(x, axis=-1), x)
                loss = T.tsum(T.mul(y, y))
                tape.backward(loss)
            return x.grad.copy()

        g1, g2 = run(), run()
        assert np.array_equal(g1, g2)

    def test_no_tape_no_graph(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        y = T.mul(x, x)
        assert not y.requires_grad  # nothing recorded outside a tape

    def test_nested_tape_rejected(self):
        with T.Tape():
            with pytest.raises(RuntimeError):
                with T.Tape():
                    pass

    def test_backward_requires_scalar(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True)
        with T.Tape() as tape:
            y = T.mul(x, x)
        with pytest.raises(ShapeError):
            tape.backward(y)

    def test_first_nonfinite_names_op(self):
        x = T.Tensor([1.0, 2.0], requires_grad=True, dtype=np.float64)
        with T.Tape() as tape, np.errstate(over="ignore"):
            y = T.exp(T.scale(x, 1000.0))  # overflows to inf
            T.tsum(y)
        assert "exp" in tape.first_nonfinite()


class TestErrors:
    def test_matmul_shape_error_names_both(self):
        a = T.Tensor(np.zeros((2, 3)))
        b = T.Tensor(np.zeros((4, 2)))
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
            T.matmul(a, b)

    def test_log_domain(self):
        with pytest.raises(DomainError):
            T.log(T.Tensor([1.0, -0.5]))

    def test_softmax_bad_axis(self):
        with pytest.raises(ShapeError):
            T.softmax(T.Tensor(np.zeros((2, 2))), axis=5)

    def test_mixed_dtype_rejected(self):
        a = T.Tensor(np.zeros(3), dtype=np.float32)
        b = T.Tensor(np.zeros(3), dtype=np.float64)
        with pytest.raises(ShapeError):
            T.add(a, b)
