"""Float forward/backward primitives for the toy graph executor.

Each ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
maps the output gradient (and the cache) back to input/parameter gradients.
Tensors are NHWC for spatial layers and ``(batch, features)`` otherwise.
"""

import numpy as np

from .kernels import _pair, conv_output_size, im2col, im2col_patches


def fc_forward(x, w, b):
    x2 = x.reshape(x.shape[0], -1)
    return x2 @ w + b, (x.shape, x2)


def fc_backward(g, w, cache):
    shape, x2 = cache
    return (g @ w.T).reshape(shape), x2.T @ g, g.sum(axis=0)


def _col2im(gcols, x_shape, kernel, stride, padding):
    # gcols: (n, oh, ow, kh*kw, c)
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    n, h, w, c = x_shape
    oh, ow = gcols.shape[1], gcols.shape[2]
    gx = np.zeros((n, h + 2 * ph, w + 2 * pw, c), dtype=gcols.dtype)
    t = 0
    for ky in range(kh):
        for kx in range(kw):
            gx[:, ky : ky + (oh - 1) * sh + 1 : sh, kx : kx + (ow - 1) * sw + 1 : sw, :] += gcols[:, :, :, t, :]
            t += 1
    return gx[:, ph : ph + h, pw : pw + w, :]


def conv2d_forward(x, w, b, stride=1, padding=0):
    kh, kw, cin, cout = w.shape
    n, h, wd, _ = x.shape
    oh, ow = conv_output_size(h, wd, (kh, kw), stride, padding)
    cols = im2col(x, (kh, kw), stride, padding)
    out = cols @ w.reshape(-1, cout) + b
    return out.reshape(n, oh, ow, cout), (x.shape, cols)


def conv2d_backward(g, w, cache, stride=1, padding=0):
    x_shape, cols = cache
    kh, kw, cin, cout = w.shape
    g2 = g.reshape(-1, cout)
    dw = (cols.T @ g2).reshape(w.shape)
    db = g2.sum(axis=0)
    gcols = (g2 @ w.reshape(-1, cout).T).reshape(g.shape[:3] + (kh * kw, cin))
    return _col2im(gcols, x_shape, (kh, kw), stride, padding), dw, db


def depthwise_forward(x, w, b, stride=1, padding=0):
    # w: (kh, kw, c)
    kh, kw, c = w.shape
    patches = im2col_patches(x, (kh, kw), stride, padding)
    out = np.einsum("nhwtc,tc->nhwc", patches, w.reshape(kh * kw, c)) + b
    return out, (x.shape, patches)


def depthwise_backward(g, w, cache, stride=1, padding=0):
    x_shape, patches = cache
    kh, kw, c = w.shape
    dw = np.einsum("nhwtc,nhwc->tc", patches, g).reshape(w.shape)
    db = g.sum(axis=(0, 1, 2))
    gpatch = g[:, :, :, None, :] * w.reshape(1, 1, 1, kh * kw, c)
    return _col2im(gpatch, x_shape, (kh, kw), stride, padding), dw, db


def relu_forward(x):
    return np.maximum(x, 0), x > 0


def relu6_forward(x):
    return np.clip(x, 0, 6), (x > 0) & (x < 6)


def mask_backward(g, mask):
    return g * mask


def pool_windows(x, size, stride):
    return im2col_patches(x, size, stride, 0)


def maxpool_forward(x, size=2, stride=2):
    p = pool_windows(x, size, stride)
    arg = p.argmax(axis=3)
    out = np.take_along_axis(p, arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    return out, (x.shape, arg, p.shape[3])


def maxpool_backward(g, cache, size=2, stride=2):
    x_shape, arg, taps = cache
    gp = np.zeros(g.shape[:3] + (taps, g.shape[3]), dtype=g.dtype)
    np.put_along_axis(gp, arg[:, :, :, None, :], g[:, :, :, None, :], axis=3)
    return _col2im(gp, x_shape, size, stride, 0)


def avgpool_forward(x, size=2, stride=2):
    p = pool_windows(x, size, stride)
    return p.mean(axis=3), (x.shape, p.shape[3])


def avgpool_backward(g, cache, size=2, stride=2):
    x_shape, taps = cache
    gp = np.repeat(g[:, :, :, None, :] / taps, taps, axis=3)
    return _col2im(gp, x_shape, size, stride, 0)


def pad_forward(x, padding):
    ph, pw = _pair(padding)
    return np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0))), None


def pad_backward(g, padding):
    ph, pw = _pair(padding)
    h, w = g.shape[1] - 2 * ph, g.shape[2] - 2 * pw
    return g[:, ph : ph + h, pw : pw + w, :]


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, labels):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    p = softmax(logits.astype(np.float64))
    loss = -np.log(np.maximum(p[np.arange(n), labels], 1e-12)).mean()
    grad = p
    grad[np.arange(n), labels] -= 1.0
    return float(loss), (grad / n).astype(logits.dtype)


def mse(pred, target):
    diff = pred - target.reshape(pred.shape)
    return float(np.mean(diff.astype(np.float64) ** 2)), (2.0 * diff / diff.size).astype(pred.dtype)
