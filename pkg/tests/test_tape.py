import numpy as np
import pytest

from dlhim import tape as T


def _fd_grad(fn, x, eps=1e-6):
    g = np.zeros_like(x)
    for i in range(len(x)):
        d = np.zeros_like(x)
        d[i] = eps
        g[i] = (fn(x + d) - fn(x - d)) / (2 * eps)
    return g


def test_plain_arrays_skip_recording():
    x = np.array([1.0, -2.0])
    assert isinstance(T.tanh(x), np.ndarray)
    assert float(T.sum_squares(x)) == 5.0


def test_dense_layer_gradient_matches_finite_differences(rng):
    W = rng.standard_normal((4, 3))
    b = rng.standard_normal(3)

    def loss(x):
        return float(T.sum_squares(T.tanh(T.affine(x, W, b))))

    x0 = rng.standard_normal(4)
    tape = T.Tape()
    x = tape.leaf(x0)
    out = T.sum_squares(T.tanh(T.affine(x, W, b)))
    grad, = tape.gradients(out, [x])
    np.testing.assert_allclose(grad, _fd_grad(loss, x0), rtol=1e-6, atol=1e-9)


def test_weight_gradient_of_matmul(rng):
    x0 = rng.standard_normal(3)
    W0 = rng.standard_normal((3, 2))
    tape = T.Tape()
    W = tape.leaf(W0)
    out = T.sum_squares(T.matmul(x0, W))
    grad, = tape.gradients(out, [W])
    np.testing.assert_allclose(grad, 2.0 * np.outer(x0, x0 @ W0))


def test_concat_take_and_division(rng):
    a0, b0 = rng.standard_normal(3), rng.standard_normal(2)
    tape = T.Tape()
    a, b = tape.leaf(a0), tape.leaf(b0)
    joined = T.concat([a, b])
    out = T.div(T.sum_squares(T.take(joined, 1, 4)), T.sum_squares(b))
    ga, gb = tape.gradients(out, [a, b])

    def loss(v):
        return float((v[1:4] @ v[1:4]) / (v[3:] @ v[3:]))

    g = _fd_grad(loss, np.concatenate([a0, b0]))
    np.testing.assert_allclose(np.concatenate([ga, gb]), g, rtol=1e-6, atol=1e-9)


def test_abs_reductions_gradients():
    x0 = np.array([0.5, -3.0, 1.0])
    tape = T.Tape()
    x = tape.leaf(x0)
    gmax, = tape.gradients(T.abs_max(x), [x])
    np.testing.assert_array_equal(gmax, [0.0, -1.0, 0.0])
    tape = T.Tape()
    x = tape.leaf(x0)
    gsum, = tape.gradients(T.abs_sum(x), [x])
    np.testing.assert_array_equal(gsum, [1.0, -1.0, 1.0])


def test_unused_leaf_gets_zero_gradient():
    tape = T.Tape()
    x, y = tape.leaf(np.ones(2)), tape.leaf(np.ones(3))
    out = T.sum_squares(x)
    _, gy = tape.gradients(out, [x, y])
    np.testing.assert_array_equal(gy, np.zeros(3))


def test_leaves_are_not_counted_in_bytes():
    tape = T.Tape()
    x = tape.leaf(np.ones(100))
    assert tape.nbytes == 0
    T.tanh(x)
    assert tape.nbytes == 800


def test_gradients_need_scalar_output():
    tape = T.Tape()
    x = tape.leaf(np.ones(2))
    with pytest.raises(ValueError):
        tape.gradients(T.tanh(x), [x])


def test_linear_uses_supplied_adjoint(rng):
    M = rng.standard_normal((3, 4))
    x0 = rng.standard_normal(4)
    tape = T.Tape()
    x = tape.leaf(x0)
    out = T.sum_squares(T.linear(x, lambda v: M @ v, lambda g: M.T @ g))
    grad, = tape.gradients(out, [x])
    np.testing.assert_allclose(grad, 2.0 * M.T @ (M @ x0))


class TestSpectralFilter:
    def test_unit_multipliers_reproduce_input(self, rng):
        r = rng.standard_normal(31)
        y = T.spectral_filter(r, np.ones(31), np.zeros(31))
        np.testing.assert_allclose(y, r, atol=1e-12)

    def test_single_mode_scaling(self):
        n = 15
        x = np.arange(1, n + 1) / (n + 1)
        a = np.zeros(4)
        a[2] = 2.5
        y = T.spectral_filter(np.sin(3 * np.pi * x) + np.sin(np.pi * x), a, np.zeros(4))
        np.testing.assert_allclose(y, 2.5 * np.sin(3 * np.pi * x), atol=1e-12)

    def test_truncation_drops_high_modes(self):
        n = 15
        x = np.arange(1, n + 1) / (n + 1)
        y = T.spectral_filter(np.sin(9 * np.pi * x), np.ones(4), np.zeros(4))
        np.testing.assert_allclose(y, 0.0, atol=1e-12)

    def test_too_many_multipliers(self):
        with pytest.raises(ValueError):
            T.spectral_filter(np.ones(3), np.ones(4), np.ones(4))

    def test_gradients_match_finite_differences(self, rng):
        n, m = 15, 6
        r0, a0, b0 = rng.standard_normal(n), rng.standard_normal(m), rng.standard_normal(m)
        w = rng.standard_normal(n)

        tape = T.Tape()
        r, a, b = tape.leaf(r0), tape.leaf(a0), tape.leaf(b0)
        out = T.sum_squares(T.mul(T.spectral_filter(r, a, b), w))
        gr, ga, gb = tape.gradients(out, [r, a, b])

        def loss(v):
            y = T.spectral_filter(v[:n], v[n:n + m], v[n + m:])
            return float(np.sum((y * w) ** 2))

        g = _fd_grad(loss, np.concatenate([r0, a0, b0]))
        np.testing.assert_allclose(np.concatenate([gr, ga, gb]), g, rtol=1e-5, atol=1e-8)
