import math

import numpy as np
import pytest

import tloc.autodiff as ad
from tloc.autodiff import Tensor


def fd_check(fn, tensors, rel_tol=1e-6, h=1e-6, rng=None):
    """Central-difference gradient check on every element of every tensor."""
    out = fn()
    ad.backward(out)
    for t in tensors:
        grad = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = float(fn().data)
            flat[i] = orig - h
            down = float(fn().data)
            flat[i] = orig
            num = (up - down) / (2 * h)
            got = grad.reshape(-1)[i]
            denom = max(abs(num), abs(got), 1e-8)
            assert abs(num - got) / denom < rel_tol, (num, got)


class TestElementwise:
    def test_add_mul_values(self):
        a = Tensor([1.0, 2.0])
        b = Tensor([3.0, 4.0])
        np.testing.assert_array_equal((a + b).data, [4.0, 6.0])
        np.testing.assert_array_equal((a * b).data, [3.0, 8.0])
        np.testing.assert_array_equal((a - b).data, [-2.0, -2.0])

    def test_broadcast_grad(self):
        a = Tensor(np.ones((3, 4)), requires_grad=True)
        b = Tensor(np.ones(4), requires_grad=True)
        out = (a * b).sum()
        ad.backward(out)
        np.testing.assert_array_equal(a.grad, np.ones((3, 4)))
        np.testing.assert_array_equal(b.grad, np.full(4, 3.0))

    def test_grad_accumulates_across_uses(self):
        a = Tensor([2.0], requires_grad=True)
        out = (a * a).sum()
        ad.backward(out)
        np.testing.assert_allclose(a.grad, [4.0])

    def test_fd_sweep(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(3,)), requires_grad=True)
        fd_check(lambda: ((a + b) * a - b).mean(), [a, b])


class TestMatmul:
    def test_hand_values(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[5.0, 6.0], [7.0, 8.0]])
        np.testing.assert_array_equal((a @ b).data, [[19, 22], [43, 50]])

    def test_identity(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(4, 4))
        np.testing.assert_array_equal((Tensor(x) @ Tensor(np.eye(4))).data, x)

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 2)))

    def test_batched_fd(self):
        rng = np.random.default_rng(2)
        a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 4, 2)), requires_grad=True)
        fd_check(lambda: (a @ b).sum(), [a, b])


class TestShapes:
    def test_reshape_transpose_fd(self):
        rng = np.random.default_rng(3)
        a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
        fd_check(lambda: (a.transpose((2, 0, 1)).reshape(4, 6) * 2.0).sum(), [a])

    def test_getitem_fd(self):
        rng = np.random.default_rng(4)
        a = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        fd_check(lambda: (a[1:3, ::2] * a[0:2, ::2]).sum(), [a])

    def test_concat_values_and_fd(self):
        a = Tensor([[1.0], [2.0]], requires_grad=True)
        b = Tensor([[3.0], [4.0]], requires_grad=True)
        out = ad.concat([a, b], axis=1)
        np.testing.assert_array_equal(out.data, [[1, 3], [2, 4]])
        fd_check(lambda: (ad.concat([a, b], axis=1) * ad.concat([b, a], axis=1)).sum(),
                 [a, b])

    def test_sum_mean_axes(self):
        a = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        assert a.sum().data == 15.0
        np.testing.assert_array_equal(a.sum(axis=0).data, [3, 5, 7])
        np.testing.assert_allclose(a.mean(axis=1).data, [1.0, 4.0])
        fd_check(lambda: (a.mean(axis=1) * a.sum(axis=1)).sum(), [a])


class TestSoftmax:
    def test_two_logit_example(self):
        # logits (0, ln 3) -> probabilities (0.25, 0.75)
        y = ad.softmax(Tensor([0.0, math.log(3.0)]))
        np.testing.assert_allclose(y.data, [0.25, 0.75], atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(5)
        y = ad.softmax(Tensor(rng.normal(size=(4, 7)) * 10))
        np.testing.assert_allclose(y.data.sum(axis=1), np.ones(4), atol=1e-12)

    def test_shift_invariance(self):
        x = np.array([[1.0, 2.0, 3.0]])
        a = ad.softmax(Tensor(x)).data
        b = ad.softmax(Tensor(x + 1000.0)).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_fd(self):
        rng = np.random.default_rng(6)
        x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        w = rng.normal(size=(3, 5))
        fd_check(lambda: (ad.softmax(x) * w).sum(), [x])


class TestLayerNorm:
    def test_normalizes(self):
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(2.0, 3.0, size=(4, 8)))
        y = ad.layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8)))
        np.testing.assert_allclose(y.data.mean(axis=-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(y.data.var(axis=-1), 1.0, atol=1e-4)

    def test_affine_applied(self):
        x = Tensor(np.array([[1.0, -1.0]]))
        y = ad.layer_norm(x, Tensor([2.0, 2.0]), Tensor([5.0, 5.0]))
        # xhat = (+1, -1) up to eps, so y = (7, 3)
        np.testing.assert_allclose(y.data, [[7.0, 3.0]], atol=1e-4)

    def test_fd(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.normal(size=(2, 6)), requires_grad=True)
        g = Tensor(rng.normal(size=6), requires_grad=True)
        b = Tensor(rng.normal(size=6), requires_grad=True)
        w = rng.normal(size=(2, 6))
        fd_check(lambda: (ad.layer_norm(x, g, b) * w).sum(), [x, g, b], rel_tol=1e-4)


class TestGelu:
    def test_values(self):
        # x * Phi(x) at a few fixed points
        y = ad.gelu(Tensor([0.0, 1.0, -1.0])).data
        assert y[0] == 0.0
        assert y[1] == pytest.approx(0.8413447460685429, abs=1e-12)
        assert y[2] == pytest.approx(-0.15865525393145707, abs=1e-12)

    def test_fd(self):
        rng = np.random.default_rng(9)
        x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        fd_check(lambda: ad.gelu(x).sum(), [x])


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = ad.cross_entropy(Tensor(np.zeros((5, 8))), np.zeros(5, dtype=int))
        assert float(loss.data) == pytest.approx(math.log(8.0), abs=1e-12)

    def test_confident_correct_goes_to_zero(self):
        logits = np.zeros((1, 4))
        logits[0, 2] = 50.0
        loss = ad.cross_entropy(Tensor(logits), np.array([2]))
        assert float(loss.data) < 1e-15

    def test_grad_closed_form(self):
        rng = np.random.default_rng(10)
        x = Tensor(rng.normal(size=(6, 5)), requires_grad=True)
        t = rng.integers(0, 5, size=6)
        loss = ad.cross_entropy(x, t)
        ad.backward(loss)
        p = np.exp(x.data - x.data.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(6), t] -= 1.0
        np.testing.assert_allclose(x.grad, p / 6, atol=1e-12)

    def test_target_validation(self):
        with pytest.raises(ValueError):
            ad.cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))
        with pytest.raises(ad.ShapeError):
            ad.cross_entropy(Tensor(np.zeros(3)), np.array([0]))

    def test_fd(self):
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
        t = rng.integers(0, 6, size=4)
        fd_check(lambda: ad.cross_entropy(x, t), [x])


class TestEmbedding:
    def test_lookup_and_scatter_grad(self):
        table = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
        ids = np.array([[0, 2], [2, 2]])
        out = ad.embedding(table, ids)
        np.testing.assert_array_equal(out.data[0, 0], [0, 1, 2])
        np.testing.assert_array_equal(out.data[1, 1], [6, 7, 8])
        ad.backward(out.sum())
        # row 2 was used three times
        np.testing.assert_array_equal(table.grad[2], [3, 3, 3])
        np.testing.assert_array_equal(table.grad[1], [0, 0, 0])


class TestBackwardMachinery:
    def test_root_must_be_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ad.ShapeError):
            ad.backward(x * 2.0)

    def test_disjoint_graph_untouched(self):
        a = Tensor([1.0], requires_grad=True)
        b = Tensor([1.0], requires_grad=True)
        ad.backward((a * 3.0).sum())
        assert b.grad is None
        np.testing.assert_array_equal(a.grad, [3.0])

    def test_no_grad_blocks_recording(self):
        a = Tensor([1.0], requires_grad=True)
        with ad.no_grad():
            out = (a * 2.0).sum()
        assert not out.requires_grad
        assert out._backward is None

    def test_diamond_graph(self):
        # d/dx of (x*x + x*x) = 4x
        x = Tensor([3.0], requires_grad=True)
        y = x * x
        ad.backward((y + y).sum())
        np.testing.assert_allclose(x.grad, [12.0])

    def test_zero_grad_resets(self):
        x = Tensor([1.0], requires_grad=True)
        ad.backward((x * 2.0).sum())
        x.zero_grad()
        assert x.grad is None
        ad.backward((x * 2.0).sum())
        np.testing.assert_array_equal(x.grad, [2.0])
