"""Autodiff engine tests: op semantics plus a finite-difference gradient oracle."""

import numpy as np
import pytest

from crossband.autodiff import (
    GradientTape,
    ParameterError,
    ShapeError,
    Tensor,
    ValidationError,
    backward,
    concat,
    embedding_lookup,
    gelu,
    layer_norm,
    matmul,
    mean,
    no_grad,
    softmax,
    soft_cross_entropy,
    take,
    transpose,
)


def central_diff(f, params, h=1e-5):
    """Finite-difference oracle: df/dp for every entry of every param."""
    grads = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                f1 = f().item()
            flat[i] = orig - h
            with no_grad():
                f2 = f().item()
            flat[i] = orig
            gflat[i] = (f1 - f2) / (2 * h)
        grads.append(g)
    return grads


def rel_err(a, b):
    denom = np.maximum(np.abs(a) + np.abs(b), 1e-8)
    return np.abs(a - b) / denom


class TestMatmul:
    def test_identity(self):
        a = np.array([[1.0, 2.0], [3.0, 4.0]])
        out = matmul(Tensor(np.eye(2)), Tensor(a))
        np.testing.assert_array_equal(out.data, a)

    def test_hand_product(self):
        # dot products by hand: [1*5+2*6, 3*5+4*6] = [17, 39]
        out = matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
        np.testing.assert_array_equal(out.data, [[17.0], [39.0]])

    def test_zero(self):
        out = matmul(Tensor(np.zeros((3, 4))), Tensor(np.ones((4, 2))))
        assert np.all(out.data == 0)

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_gradients_both_sides(self):
        rng = np.random.default_rng(0)
        a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
        loss = (matmul(a, b) * matmul(a, b)).sum()
        backward(loss)
        ga, gb = central_diff(lambda: (matmul(a, b) * matmul(a, b)).sum(), [a, b])
        assert rel_err(a.grad, ga).max() < 1e-6
        assert rel_err(b.grad, gb).max() < 1e-6


class TestSoftmax:
    def test_uniform(self):
        out = softmax(Tensor([0.0, 0.0, 0.0]), temperature=1.0)
        np.testing.assert_allclose(out.data, [1 / 3] * 3, atol=1e-15)

    def test_analytic_exponentials(self):
        x = np.log([1.0, 2.0, 3.0])
        out = softmax(Tensor(x), temperature=1.0)
        np.testing.assert_allclose(out.data, [1 / 6, 2 / 6, 3 / 6], atol=1e-15)

    def test_large_values_no_overflow(self):
        out = softmax(Tensor([1000.0, 0.0]), temperature=1.0)
        assert np.isfinite(out.data).all()
        np.testing.assert_allclose(out.data, [1.0, 0.0], atol=1e-12)

    def test_rows_sum_to_one_large_magnitude(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(-1e4, 1e4, size=(50, 7))
        out = softmax(Tensor(x))
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_temperature_validation(self):
        with pytest.raises(ParameterError):
            softmax(Tensor([1.0]), temperature=0.0)


class TestElementwise:
    def test_gelu_zero(self):
        assert gelu(Tensor(0.0)).item() == 0.0

    def test_layer_norm_constant_vector(self):
        d = 5
        g, b = Tensor(np.ones(d)), Tensor(np.zeros(d))
        out = layer_norm(Tensor(np.full(d, 3.3)), g, b)
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_embedding_lookup_row(self):
        table = Tensor(np.arange(12.0).reshape(4, 3))
        out = embedding_lookup(table, [2])
        np.testing.assert_array_equal(out.data, [[6.0, 7.0, 8.0]])

    def test_embedding_lookup_range_check(self):
        with pytest.raises(ParameterError):
            embedding_lookup(Tensor(np.zeros((4, 3))), [4])


class TestSoftCrossEntropy:
    def test_self_consistency_equals_entropy(self):
        rng = np.random.default_rng(2)
        logits = Tensor(rng.normal(size=(6, 5)))
        target = softmax(logits, temperature=2.0).data
        loss = soft_cross_entropy(target, logits, temperature=2.0)
        entropy = -(target * np.log(target)).sum(axis=-1).mean()
        np.testing.assert_allclose(loss.item(), entropy, rtol=1e-12)

    def test_one_hot_limit(self):
        logits = Tensor(np.array([[50.0, -50.0, -50.0]]))
        target = np.array([[1.0, 0.0, 0.0]])
        assert soft_cross_entropy(target, logits).item() < 1e-12

    def test_uniform_is_log_k(self):
        k = 7
        target = np.full((3, k), 1.0 / k)
        logits = Tensor(np.zeros((3, k)))
        np.testing.assert_allclose(soft_cross_entropy(target, logits).item(), np.log(k), rtol=1e-12)

    def test_unnormalized_target_rejected(self):
        with pytest.raises(ValidationError):
            soft_cross_entropy(np.array([[0.5, 0.6]]), Tensor(np.zeros((1, 2))))

    def test_gradient_matches_fd(self):
        rng = np.random.default_rng(3)
        logits = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        target = softmax(Tensor(rng.normal(size=(4, 5)))).data
        loss = soft_cross_entropy(target, logits, temperature=0.7)
        backward(loss)
        (g,) = central_diff(lambda: soft_cross_entropy(target, logits, temperature=0.7), [logits])
        assert rel_err(logits.grad, g).max() < 1e-6


class TestBackward:
    def test_sum_gives_ones(self):
        p = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
        backward(p.sum())
        np.testing.assert_array_equal(p.grad, np.ones((3, 4)))

    def test_half_sum_squares_gives_identity(self):
        p = Tensor(np.random.default_rng(1).normal(size=(5,)), requires_grad=True)
        backward((p * p).sum() * 0.5)
        np.testing.assert_allclose(p.grad, p.data, rtol=1e-12)

    def test_non_scalar_loss_rejected(self):
        p = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ShapeError):
            backward(p * 2.0)

    def test_unused_parameter_gets_zero(self):
        used = Tensor(np.ones(3), requires_grad=True)
        unused = Tensor(np.ones(2), requires_grad=True)
        backward((used * used).sum(), params=[used, unused])
        np.testing.assert_array_equal(unused.grad, np.zeros(2))

    def test_two_layer_mlp_matches_finite_differences(self):
        # random 2-layer MLP, all parameter grads vs central differences
        rng = np.random.default_rng(7)
        w1 = Tensor(rng.normal(size=(6, 8)) * 0.5, requires_grad=True)
        b1 = Tensor(rng.normal(size=(8,)) * 0.5, requires_grad=True)
        w2 = Tensor(rng.normal(size=(8, 3)) * 0.5, requires_grad=True)
        b2 = Tensor(rng.normal(size=(3,)) * 0.5, requires_grad=True)
        x = np.float64(rng.normal(size=(4, 6)))
        y = softmax(Tensor(rng.normal(size=(4, 3)))).data

        def f():
            h = gelu(matmul(Tensor(x), w1) + b1)
            logits = matmul(h, w2) + b2
            return soft_cross_entropy(y, logits)

        loss = f()
        backward(loss)
        params = [w1, b1, w2, b2]
        oracle = central_diff(f, params)
        for p, g in zip(params, oracle):
            assert rel_err(p.grad, g).max() < 1e-3

    def test_accumulation_exactly_once_per_pass(self):
        p = Tensor(np.ones(3), requires_grad=True)
        y = p * 2.0
        loss = (y + y).sum()  # p used twice via shared node
        backward(loss)
        np.testing.assert_array_equal(p.grad, np.full(3, 4.0))

    def test_tape_is_topologically_ordered(self):
        p = Tensor(np.ones(3), requires_grad=True)
        a = p * 2.0
        b = a + p
        loss = (b * a).sum()
        tape = GradientTape.trace(loss)
        pos = {id(t): i for i, t in enumerate(tape.nodes)}
        for node in tape.nodes:
            for parent in node._parents:
                if parent.requires_grad:
                    assert pos[id(parent)] < pos[id(node)]

    def test_no_grad_blocks_recording(self):
        p = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = (p * p).sum()
        assert not y.requires_grad


class TestStructural:
    def test_take_scatter_gradient(self):
        p = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
        out = take(p, [1, 1, 3], axis=0)
        backward((out * out).sum() * 0.5)
        expected = np.zeros((4, 3))
        expected[1] = 2 * p.data[1]
        expected[3] = p.data[3]
        np.testing.assert_allclose(p.grad, expected)

    def test_concat_transpose_mean_roundtrip_grads(self):
        rng = np.random.default_rng(5)
        a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(2, 3)), requires_grad=True)

        def f():
            cat = concat([a, b], axis=0)
            return (transpose(cat) * transpose(cat)).mean()

        backward(f())
        ga, gb = central_diff(f, [a, b])
        assert rel_err(a.grad, ga).max() < 1e-6
        assert rel_err(b.grad, gb).max() < 1e-6


class TestDeterminism:
    def test_identical_seeds_bitwise_identical(self):
        def run():
            rng = np.random.default_rng(42)
            w = Tensor(rng.normal(size=(8, 8)), requires_grad=True)
            x = Tensor(rng.normal(size=(4, 8)))
            out = softmax(gelu(matmul(x, w)))
            backward((out * out).sum())
            return out.data.copy(), w.grad.copy()

        o1, g1 = run()
        o2, g2 = run()
        assert np.array_equal(o1, o2)
        assert np.array_equal(g1, g2)
