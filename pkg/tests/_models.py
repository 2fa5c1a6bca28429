"""Random calibrated models for roundtrip and engine checks."""

import numpy as np

from oaq import qoat
from oaq.graph import GraphBuilder


def random_model(seed: int):
    """A random MLP or CNN with random biases, widths and range factors,
    calibrated on random inputs. Returns ``(graph, inputs)``."""
    r = np.random.default_rng(seed)
    bits = int(r.integers(4, 9))
    # asymmetric 8-bit weights can center outside int8, which plans reject
    sym = bits == 8 or bool(r.integers(0, 2))
    if r.random() < 0.5:
        b = GraphBuilder((int(r.integers(2, 12)),), seed=seed, bits=bits, symmetric_weights=sym)
        x = b.input
        for _ in range(int(r.integers(1, 4))):
            x = b.fc(x, int(r.integers(2, 24)), activation=str(r.choice(["none", "relu", "relu6"])))
    else:
        hw = int(r.integers(5, 9))
        b = GraphBuilder((hw, hw, int(r.integers(1, 4))), seed=seed, bits=bits, symmetric_weights=sym)
        x = b.conv2d(b.input, int(r.integers(2, 6)), kernel=int(r.choice([1, 3])), padding=1, activation="relu")
        if r.random() < 0.5:
            y = b.depthwise(x, kernel=3, padding=1)
            x = b.add(x, y) if r.random() < 0.5 else b.concat(x, y)
        if r.random() < 0.5:
            x = b.maxpool(x) if r.random() < 0.5 else b.avgpool(x)
        if r.random() < 0.5:
            x = b.pad(x, 1)
        x = b.fc(x, int(r.integers(2, 10)))
    if r.random() < 0.5:
        b.softmax(x)
    g = b.build()
    for k, p in g.params.items():
        if k.endswith(".bias"):
            g.params[k] = (r.standard_normal(p.shape) * 0.1).astype(p.dtype)
    for s in g.slots.values():
        s.alpha = float(r.uniform(1.0, 3.0))
    inputs = r.standard_normal((int(r.integers(1, 40)),) + g.input_shape).astype(np.float32)
    qoat.observe_only(g, inputs)
    return g, inputs
