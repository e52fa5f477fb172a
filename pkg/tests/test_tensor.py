"""Tensor library tests: hand values, independent oracles, finite differences."""

import math

import numpy as np
import numpy.testing as npt
import pytest

from lulcmap import tensor as T
from lulcmap.errors import ShapeError
from lulcmap.tensor import Tensor


def fd_gradient(loss_fn, x: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central finite differences of a scalar function, element by element.

    Independent derivative oracle: never touches the autodiff machinery.
    """
    x = x.astype(np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = loss_fn(x)
        flat[i] = orig - step
        lo = loss_fn(x)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def autodiff_gradient(op, x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    t = Tensor(x, requires_grad=True, dtype=np.float64)
    out = op(t)
    loss = T.tsum(T.multiply(out, Tensor(weight, dtype=np.float64)))
    loss.backward()
    return t.grad.copy()


def check_op_gradient(op, shape, seed, step=1e-4, tol=1e-4):
    """Compare autodiff against the FD oracle on a small 64-bit tensor."""
    rng = np.random.default_rng(seed)
    x = rng.normal(0.0, 1.0, size=shape)
    weight = rng.normal(0.0, 1.0, size=np.asarray(op(Tensor(x, dtype=np.float64)).values).shape)

    def loss_fn(arr):
        with T.no_grad():
            return float((op(Tensor(arr, dtype=np.float64)).values * weight).sum())

    ad = autodiff_gradient(op, x, weight)
    fd = fd_gradient(loss_fn, x, step)
    denom = max(np.linalg.norm(ad), np.linalg.norm(fd), 1e-8)
    rel = np.linalg.norm(ad - fd) / denom
    assert rel < tol, f"gradient mismatch for {op}: rel={rel:.3e}"


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.eye(2))
        b = Tensor([[3.0, 4.0], [5.0, 6.0]])
        npt.assert_allclose(T.matmul(a, b).values, [[3.0, 4.0], [5.0, 6.0]])

    def test_hand_arithmetic(self):
        out = T.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        npt.assert_allclose(out.values, [[11.0]])

    def test_against_triple_loop(self):
        rng = np.random.default_rng(7)
        a = rng.normal(size=(5, 7))
        b = rng.normal(size=(7, 3))
        expected = np.zeros((5, 3))
        for i in range(5):
            for j in range(3):
                for k in range(7):
                    expected[i, j] += a[i, k] * b[k, j]
        out = T.matmul(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64))
        npt.assert_allclose(out.values, expected, atol=1e-6)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))

    def test_batch_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            T.matmul(Tensor(np.zeros((2, 1, 3, 4))), Tensor(np.zeros((3, 1, 4, 2))))

    def test_batched_matches_per_slice(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(2, 3, 4, 5))
        b = rng.normal(size=(2, 3, 5, 2))
        out = T.matmul(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).values
        for i in range(2):
            for j in range(3):
                npt.assert_allclose(out[i, j], a[i, j] @ b[i, j], atol=1e-12)


class TestSoftmax:
    def test_uniform_over_zeros(self):
        npt.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0, 0.0])).values, [0.25] * 4)

    def test_closed_form_ratio(self):
        out = T.softmax(Tensor([0.0, math.log(2.0)], dtype=np.float64))
        npt.assert_allclose(out.values, [1.0 / 3.0, 2.0 / 3.0], atol=1e-12)

    def test_large_inputs_stable(self):
        out = T.softmax(Tensor([1000.0, 1000.0]))
        assert np.isfinite(out.values).all()
        npt.assert_allclose(out.values, [0.5, 0.5])

    def test_slices_sum_to_one(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(3, 4, 5)))
        for axis in range(3):
            s = T.softmax(x, axis=axis).values
            npt.assert_allclose(s.sum(axis=axis), 1.0, atol=1e-6)
            assert (s >= 0).all()

    def test_shift_invariance(self):
        rng = np.random.default_rng(1)
        for trial in range(10):
            x = rng.normal(size=(4, 6))
            base = T.softmax(Tensor(x, dtype=np.float64), axis=1).values
            shifted = T.softmax(Tensor(x + 123.456, dtype=np.float64), axis=1).values
            npt.assert_allclose(base, shifted, atol=1e-12)

    def test_invalid_axis(self):
        with pytest.raises(ShapeError):
            T.softmax(Tensor([1.0, 2.0]), axis=2)


class TestLayernorm:
    def _ln(self, x, d, **kw):
        gamma = Tensor(np.ones(d), dtype=np.float64)
        beta = Tensor(np.zeros(d), dtype=np.float64)
        return T.layernorm(Tensor(x, dtype=np.float64), gamma, beta, **kw)

    def test_constant_row_maps_to_zero(self):
        npt.assert_allclose(self._ln([5.0, 5.0, 5.0], 3).values, [0.0, 0.0, 0.0])

    def test_already_standardized(self):
        out = self._ln([1.0, -1.0], 2, eps=1e-12)
        npt.assert_allclose(out.values, [1.0, -1.0], atol=1e-6)

    def test_row_statistics(self):
        rng = np.random.default_rng(5)
        x = rng.normal(2.0, 3.0, size=(4, 16))
        out = self._ln(x, 16).values
        assert np.abs(out.mean(axis=-1)).max() <= 1e-6
        assert np.abs(out.var(axis=-1) - 1.0).max() <= 1e-3

    def test_affine_shape_mismatch(self):
        with pytest.raises(ShapeError):
            T.layernorm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))

    def test_bad_eps(self):
        with pytest.raises(ValueError):
            self._ln([1.0, 2.0], 2, eps=0.0)


class TestGelu:
    def test_zero(self):
        assert T.gelu(Tensor([0.0])).values[0] == 0.0

    def test_positive_asymptote(self):
        npt.assert_allclose(T.gelu(Tensor([10.0], dtype=np.float64)).values, [10.0], atol=1e-3)

    def test_negative_asymptote(self):
        npt.assert_allclose(T.gelu(Tensor([-10.0], dtype=np.float64)).values, [0.0], atol=1e-3)


class TestBackward:
    def test_linear_sum(self):
        w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        T.tsum(w).backward()
        npt.assert_allclose(w.grad, [1.0, 1.0, 1.0])

    def test_quadratic_form(self):
        w = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        T.tsum(T.multiply(w, w)).backward()
        npt.assert_allclose(w.grad, [2.0, 4.0, 6.0])

    def test_accumulates_across_backward_calls(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        T.tsum(w).backward()
        T.tsum(w).backward()
        npt.assert_allclose(w.grad, [2.0, 2.0])
        w.zero_grad()
        assert w.grad is None

    def test_second_backward_on_same_loss_rejected(self):
        w = Tensor([1.0], requires_grad=True)
        loss = T.tsum(w)
        loss.backward()
        with pytest.raises(ValueError, match="released|detached"):
            loss.backward()

    def test_non_scalar_loss_rejected(self):
        w = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ShapeError):
            T.backward(T.multiply(w, w))

    def test_detached_loss_rejected(self):
        with pytest.raises(ValueError, match="detached"):
            T.backward(Tensor(1.0))

    def test_diamond_graph_accumulates_once_per_path(self):
        # loss = sum(w*w + w) touches w along two paths.
        w = Tensor([3.0], requires_grad=True, dtype=np.float64)
        loss = T.tsum(T.add(T.multiply(w, w), w))
        loss.backward()
        npt.assert_allclose(w.grad, [7.0])

    def test_no_grad_disables_recording(self):
        w = Tensor([1.0], requires_grad=True)
        with T.no_grad():
            out = T.multiply(w, w)
        assert not out.requires_grad
        assert out._backward_fn is None


class TestPrimitiveGradients:
    """Central-difference checks on small 64-bit tensors (rel error < 1e-4)."""

    def test_add_broadcast(self):
        rng = np.random.default_rng(11)
        b = rng.normal(size=(5,))
        check_op_gradient(lambda t: T.add(t, Tensor(b, dtype=np.float64)), (4, 5), 11)
        # gradient w.r.t. the broadcast side
        a = rng.normal(size=(4, 5))
        check_op_gradient(lambda t: T.add(Tensor(a, dtype=np.float64), t), (5,), 12)

    def test_multiply_broadcast(self):
        rng = np.random.default_rng(13)
        b = rng.normal(size=(4, 5))
        check_op_gradient(lambda t: T.multiply(Tensor(b, dtype=np.float64), t), (5,), 13)

    def test_scale(self):
        check_op_gradient(lambda t: T.scale(t, -2.5), (3, 4), 14)

    def test_matmul_both_sides(self):
        rng = np.random.default_rng(15)
        b = rng.normal(size=(4, 3))
        a = rng.normal(size=(5, 4))
        check_op_gradient(lambda t: T.matmul(t, Tensor(b, dtype=np.float64)), (5, 4), 15)
        check_op_gradient(lambda t: T.matmul(Tensor(a, dtype=np.float64), t), (4, 3), 16)

    def test_matmul_batched(self):
        rng = np.random.default_rng(17)
        b = rng.normal(size=(2, 2, 4, 3))
        check_op_gradient(lambda t: T.matmul(t, Tensor(b, dtype=np.float64)), (2, 2, 3, 4), 17)

    def test_matmul_shared_rhs(self):
        check_op_gradient(lambda t: T.matmul(Tensor(np.random.default_rng(4).normal(size=(2, 3, 4)), dtype=np.float64), t), (4, 3), 18)

    def test_transpose(self):
        check_op_gradient(lambda t: T.transpose(t, (1, 2, 0)), (2, 3, 4), 19)

    def test_reshape(self):
        check_op_gradient(lambda t: T.reshape(t, (6, 2)), (3, 4), 20)

    def test_concat(self):
        rng = np.random.default_rng(21)
        b = rng.normal(size=(2, 3))
        check_op_gradient(lambda t: T.concat([t, Tensor(b, dtype=np.float64)], axis=0), (2, 3), 21)

    def test_index(self):
        check_op_gradient(lambda t: t[:, 1:3], (4, 5), 22)

    def test_mean_and_sum(self):
        check_op_gradient(lambda t: T.mean(t, axis=1), (4, 5), 23)
        check_op_gradient(lambda t: T.mean(t), (8,), 24)
        check_op_gradient(lambda t: T.tsum(t, axis=0, keepdims=True), (4, 5), 25)

    def test_softmax(self):
        check_op_gradient(lambda t: T.softmax(t, axis=-1), (4, 6), 26)

    def test_log_softmax(self):
        check_op_gradient(lambda t: T.log_softmax(t, axis=-1), (4, 6), 27)

    def test_layernorm_all_inputs(self):
        rng = np.random.default_rng(28)
        gamma = rng.normal(size=(6,))
        beta = rng.normal(size=(6,))
        check_op_gradient(
            lambda t: T.layernorm(t, Tensor(gamma, dtype=np.float64), Tensor(beta, dtype=np.float64)),
            (4, 6), 28,
        )
        x = rng.normal(size=(4, 6))
        check_op_gradient(
            lambda t: T.layernorm(Tensor(x, dtype=np.float64), t, Tensor(beta, dtype=np.float64)),
            (6,), 29,
        )
        check_op_gradient(
            lambda t: T.layernorm(Tensor(x, dtype=np.float64), Tensor(gamma, dtype=np.float64), t),
            (6,), 30,
        )

    def test_gelu(self):
        check_op_gradient(T.gelu, (8, 8), 31)

    def test_embedding(self):
        idx = np.array([0, 2, 2, 1])
        check_op_gradient(lambda t: T.embedding(t, idx), (3, 4), 32)


class TestDropout:
    def test_eval_mode_is_identity(self):
        x = Tensor([1.0, 2.0, 3.0])
        assert T.dropout(x, 0.5, train=False) is x

    def test_p_zero_is_identity(self):
        x = Tensor([1.0, 2.0, 3.0])
        assert T.dropout(x, 0.0, train=True) is x

    def test_train_mode_inverted_scaling(self):
        rng = np.random.default_rng(33)
        x = Tensor(np.ones((100, 100)))
        out = T.dropout(x, 0.25, train=True, rng=rng).values
        kept = out[out != 0]
        npt.assert_allclose(kept, 1.0 / 0.75)

    def test_backward_uses_same_mask(self):
        x = Tensor(np.ones(1000), requires_grad=True)
        out = T.dropout(x, 0.5, train=True, rng=np.random.default_rng(34))
        mask = out.values.copy()  # equals the scaled mask since x == 1
        T.tsum(out).backward()
        npt.assert_allclose(x.grad, mask)

    def test_requires_rng(self):
        with pytest.raises(ValueError):
            T.dropout(Tensor([1.0]), 0.5, train=True)

    def test_bad_probability(self):
        with pytest.raises(ValueError):
            T.dropout(Tensor([1.0]), 1.0, train=True, rng=np.random.default_rng(0))


class TestShapeRoundTrips:
    def test_reshape_round_trip_is_identity(self):
        rng = np.random.default_rng(35)
        for shape, inner in [((3, 4), (12,)), ((2, 3, 4), (4, 6)), ((5,), (5, 1))]:
            x = rng.normal(size=shape)
            back = T.reshape(T.reshape(Tensor(x, dtype=np.float64), inner), shape)
            npt.assert_array_equal(back.values, x)

    def test_embedding_lookup_values(self):
        table = Tensor(np.arange(12.0).reshape(4, 3))
        out = T.embedding(table, np.array([2, 0]))
        npt.assert_array_equal(out.values, [[6.0, 7.0, 8.0], [0.0, 1.0, 2.0]])

    def test_embedding_range_check(self):
        with pytest.raises(ValueError, match="out of range"):
            T.embedding(Tensor(np.zeros((2, 2))), np.array([2]))

    def test_finite_outputs_on_finite_inputs(self):
        rng = np.random.default_rng(36)
        x = Tensor(rng.normal(size=(6, 6)) * 50.0)
        for op in (lambda t: T.softmax(t), lambda t: T.log_softmax(t), T.gelu,
                   lambda t: T.layernorm(t, Tensor(np.ones(6)), Tensor(np.zeros(6)))):
            assert np.isfinite(op(x).values).all()
