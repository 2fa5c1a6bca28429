import numpy as np
import pytest

from oaq import nn


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


@pytest.fixture
def r():
    return np.random.default_rng(0)


def _check(forward, backward, x, params, r):
    out, cache = forward(x, *params)
    up = r.standard_normal(out.shape)

    def loss():
        return float((forward(x, *params)[0] * up).sum())

    grads = backward(up, cache)
    for arr, g in zip((x,) + tuple(params), grads):
        np.testing.assert_allclose(g, numeric_grad(loss, arr), rtol=1e-5, atol=1e-7)


def test_fc_gradients(r):
    x, w, b = r.standard_normal((3, 4)), r.standard_normal((4, 5)), r.standard_normal(5)
    _check(nn.fc_forward, lambda g, c: nn.fc_backward(g, w, c), x, (w, b), r)


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv_gradients(r, stride, padding):
    x, w, b = r.standard_normal((2, 5, 5, 2)), r.standard_normal((3, 3, 2, 3)), r.standard_normal(3)
    _check(lambda x, w, b: nn.conv2d_forward(x, w, b, stride, padding),
           lambda g, c: nn.conv2d_backward(g, w, c, stride, padding), x, (w, b), r)


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 0)])
def test_depthwise_gradients(r, stride, padding):
    x, w, b = r.standard_normal((2, 5, 5, 3)), r.standard_normal((3, 3, 3)), r.standard_normal(3)
    _check(lambda x, w, b: nn.depthwise_forward(x, w, b, stride, padding),
           lambda g, c: nn.depthwise_backward(g, w, c, stride, padding), x, (w, b), r)


def test_pool_and_pad_gradients(r):
    x = r.standard_normal((2, 4, 4, 3))
    _check(lambda x: nn.maxpool_forward(x, 2, 2), lambda g, c: (nn.maxpool_backward(g, c, 2, 2),), x, (), r)
    _check(lambda x: nn.avgpool_forward(x, 2, 2), lambda g, c: (nn.avgpool_backward(g, c, 2, 2),), x, (), r)
    _check(lambda x: nn.pad_forward(x, 1), lambda g, c: (nn.pad_backward(g, 1),), x, (), r)


def test_conv_matches_naive(r):
    x, w, b = r.standard_normal((1, 5, 4, 2)), r.standard_normal((3, 3, 2, 2)), r.standard_normal(2)
    out, _ = nn.conv2d_forward(x, w, b, 2, 1)
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    for i in range(out.shape[1]):
        for j in range(out.shape[2]):
            patch = xp[0, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3, :]
            np.testing.assert_allclose(out[0, i, j], np.einsum("hwc,hwco->o", patch, w) + b, rtol=1e-12)


def test_cross_entropy_gradient(r):
    z = r.standard_normal((4, 5))
    y = np.array([0, 3, 1, 4])
    _, g = nn.cross_entropy(z, y)
    np.testing.assert_allclose(g, numeric_grad(lambda: nn.cross_entropy(z, y)[0], z), atol=1e-7)


def test_mse_gradient(r):
    p, t = r.standard_normal((3, 2)), r.standard_normal((3, 2))
    _, g = nn.mse(p, t)
    np.testing.assert_allclose(g, numeric_grad(lambda: nn.mse(p, t)[0], p), atol=1e-7)
