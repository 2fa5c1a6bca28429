"""Toy datasets for training and overflow studies."""

from __future__ import annotations

import numpy as np

DATASETS = ("blobs", "synthetic10", "digits")


def gaussian_blobs(n: int = 2048, classes: int = 10, features: int = 64, spread: float = 1.0,
                   separation: float = 3.0, seed: int = 0):
    """Isotropic Gaussian clusters around random class centres."""
    rng = np.random.default_rng(seed)
    centres = rng.standard_normal((classes, features)) * separation / np.sqrt(features) * 2.0
    y = rng.integers(0, classes, size=n)
    x = centres[y] + rng.standard_normal((n, features)) * spread
    return x.astype(np.float32), y.astype(np.int64)


def synthetic10(n: int = 4096, features: int = 64, seed: int = 0, noise: float = 0.3):
    """10-class task whose labels come from a fixed random two-layer teacher.

    Inputs are non-negative (pixel-like) so the first layer's accumulations
    are not centred, which makes deep layers prone to 16-bit overflow.
    """
    rng = np.random.default_rng(seed)
    teacher = np.random.default_rng(12345)
    w1 = teacher.standard_normal((features, 32))
    w2 = teacher.standard_normal((32, 10))
    x = rng.uniform(0.0, 1.0, size=(n, features))
    h = np.maximum((x - 0.5) @ w1, 0.0)
    logits = h @ w2 + noise * rng.standard_normal((n, 10))
    return x.astype(np.float32), np.argmax(logits, axis=1).astype(np.int64)


def digits(seed: int = 0):
    """The 8x8 handwritten digits bundled with scikit-learn, scaled to [0, 1] and shuffled."""
    try:
        from sklearn.datasets import load_digits
    except ImportError as exc:  # pragma: no cover
        raise RuntimeError("the digits dataset needs scikit-learn (pip install 'oaq[digits]')") from exc
    d = load_digits()
    x = (d.data / 16.0).astype(np.float32)
    order = np.random.default_rng(seed).permutation(len(x))
    return x[order], d.target[order].astype(np.int64)


def make(name: str, n: int = 2048, seed: int = 0, **kw):
    if name == "blobs":
        return gaussian_blobs(n=n, seed=seed, **kw)
    if name == "synthetic10":
        return synthetic10(n=n, seed=seed, **kw)
    if name == "digits":
        x, y = digits(seed)
        return x[:n], y[:n]
    raise ValueError(f"unknown dataset {name!r}; choose from {DATASETS}")


def split(x, y, test_fraction: float = 0.25):
    k = int(round(len(x) * (1 - test_fraction)))
    return (x[:k], y[:k]), (x[k:], y[k:])
