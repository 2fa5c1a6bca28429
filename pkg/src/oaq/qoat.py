"""Quantization-overflow-aware training (QOAT).

The float forward pass runs with fake quantization on every slot. Every
``update_every`` steps a shadow pass re-quantizes the inputs and weights of
each Conv/FC layer to integers, accumulates them in a 16-bit holder and
counts overflow events ``N_o``. Those counts drive the range-mapping factor
of the layer's input-activation slot and weight slot:

* ``N_o > 0``: ``alpha += min(lr_i(step) * ln(N_o), l_c)`` (floored at ``lr_i``)
* ``N_o == 0``: ``alpha = max(1, alpha - lr_d)``
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import nn
from .graph import COMPUTE_KINDS, PASS_KINDS, ModelGraph, RangeObserver
from .kernels import (
    AccumulatorConfig,
    OverflowReport,
    accumulate_gemm,
    conv_accumulate,
)
from .quant import QuantParams, dequantize, quantize

log = logging.getLogger(__name__)


class NumericError(RuntimeError):
    """Training produced a non-finite loss or activation."""


@dataclass(frozen=True)
class CalibConfig:
    lr_i: float = 0.05
    lr_d: float = 0.001
    l_c: float = 0.2
    update_every: int = 10
    lr_i_decay: float = 0.99
    alpha_init: float = 1.0
    skip_first_layer_weights: bool = True
    momentum: float = 0.99
    acc_bits: int = 16
    # alpha is held fixed for this trailing fraction of training steps
    freeze_fraction: float = 0.1

    def __post_init__(self):
        for name in ("lr_i", "lr_d", "l_c"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.update_every < 1:
            raise ValueError("update_every must be >= 1")
        if not 0 < self.lr_i_decay <= 1:
            raise ValueError("lr_i_decay must be in (0, 1]")
        if self.alpha_init < 1:
            raise ValueError("alpha_init must be >= 1")
        if not 0 <= self.freeze_fraction < 1:
            raise ValueError("freeze_fraction must be in [0, 1)")

    def lr_i_at(self, step: int) -> float:
        return self.lr_i * self.lr_i_decay ** (step // self.update_every)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 64
    seed: int = 0


# ---------------------------------------------------------------------------
# Quant nodes and observers
# ---------------------------------------------------------------------------


def fake_quant(t, p: QuantParams):
    """Fake-quantized tensor and the straight-through gradient mask."""
    t = np.asarray(t)
    out = dequantize(quantize(t, p), p).astype(np.result_type(t.dtype, np.float32))
    lo, hi = p.real_range
    mask = (t >= lo) & (t <= hi)
    return out, mask


def fake_quant_forward(t, p: QuantParams) -> np.ndarray:
    return fake_quant(t, p)[0]


def fake_quant_backward(grad, t, p: QuantParams) -> np.ndarray:
    """Straight-through estimator: identity inside the real range, zero outside."""
    return grad * fake_quant(t, p)[1]


def observe_range(obs: RangeObserver, batch) -> RangeObserver:
    batch = np.asarray(batch)
    if batch.size == 0:
        raise ValueError("cannot observe an empty batch")
    lo, hi = float(batch.min()), float(batch.max())
    if not (math.isfinite(lo) and math.isfinite(hi)):
        raise NumericError(f"non-finite activations [{lo}, {hi}]")
    if not obs.initialized:
        return replace(obs, r_min=lo, r_max=hi, initialized=True)
    m = obs.momentum
    return replace(obs, r_min=m * obs.r_min + (1 - m) * lo, r_max=m * obs.r_max + (1 - m) * hi)


def update_alpha(alpha: float, n_o: int, cfg: CalibConfig, step: int) -> float:
    if n_o < 0:
        raise ValueError("overflow count must be non-negative")
    if n_o > 0:
        lr = cfg.lr_i_at(step)
        return alpha + min(max(lr * math.log(n_o), lr), cfg.l_c)
    return max(1.0, alpha - cfg.lr_d)


# ---------------------------------------------------------------------------
# Float executor
# ---------------------------------------------------------------------------


@dataclass
class Tape:
    env: dict = field(default_factory=dict)
    caches: dict = field(default_factory=dict)
    masks: dict = field(default_factory=dict)


def _emit(g: ModelGraph, tape: Tape, name: str, t, quant: bool, observe: bool):
    if not quant:
        tape.env[name] = t
        return
    slot = g.slots[name]
    if observe:
        slot.observer = observe_range(slot.observer, t)
    y, mask = fake_quant(t, slot.params())
    tape.env[name] = y
    tape.masks[name] = mask


def _fused(z, activation):
    if activation == "relu":
        return nn.relu_forward(z)
    if activation == "relu6":
        return nn.relu6_forward(z)
    return z, None


def forward(g: ModelGraph, x, quant: bool = True, observe: bool = False) -> Tape:
    """Run the float graph, fake-quantizing every slot when ``quant`` is set."""
    tape = Tape()
    _emit(g, tape, g.input_name, np.asarray(x), quant, observe)
    for layer in g.layers:
        ins = [tape.env[t] for t in layer.inputs]
        k, a = layer.kind, layer.attrs
        if k in COMPUTE_KINDS:
            w, b = g.params[layer.weight], g.params[layer.bias]
            wmask = None
            if quant:
                w, wmask = fake_quant(w, g.weight_params(layer))
            if k == "fc":
                z, cache = nn.fc_forward(ins[0], w, b)
            elif k == "conv2d":
                z, cache = nn.conv2d_forward(ins[0], w, b, a["stride"], a["padding"])
            else:
                z, cache = nn.depthwise_forward(ins[0], w, b, a["stride"], a["padding"])
            y, amask = _fused(z, a["activation"])
            tape.caches[layer.name] = (cache, w, wmask, amask)
        elif k == "relu":
            y, tape.caches[layer.name] = nn.relu_forward(ins[0])
        elif k == "relu6":
            y, tape.caches[layer.name] = nn.relu6_forward(ins[0])
        elif k == "add":
            y = ins[0] + ins[1]
        elif k == "concat":
            y = np.concatenate(ins, axis=-1)
            tape.caches[layer.name] = ins[0].shape[-1]
        elif k == "maxpool":
            y, tape.caches[layer.name] = nn.maxpool_forward(ins[0], a["size"], a["stride"])
        elif k == "avgpool":
            y, tape.caches[layer.name] = nn.avgpool_forward(ins[0], a["size"], a["stride"])
        elif k == "pad":
            y, _ = nn.pad_forward(ins[0], a["padding"])
        elif k == "softmax":
            y = nn.softmax(ins[0])
        else:  # pragma: no cover - LayerSpec.check rejects unknown kinds
            raise ValueError(k)
        if k in PASS_KINDS or k == "softmax":
            tape.env[layer.output] = y
        else:
            _emit(g, tape, layer.output, y, quant, observe)
    return tape


def _acc(grads: dict, name: str, gx):
    grads[name] = grads[name] + gx if name in grads else gx


def backward(g: ModelGraph, tape: Tape, grad_logits) -> dict:
    """Parameter gradients from the gradient of the loss w.r.t. the logits."""
    grads = {g.logits_name: grad_logits}
    pgrads = {}
    for layer in reversed(g.layers):
        if layer.output not in grads:
            continue
        gy = grads.pop(layer.output)
        if layer.output in tape.masks:
            gy = gy * tape.masks[layer.output]
        k, a = layer.kind, layer.attrs
        if k in COMPUTE_KINDS:
            cache, w, wmask, amask = tape.caches[layer.name]
            if amask is not None:
                gy = gy * amask
            if k == "fc":
                gx, dw, db = nn.fc_backward(gy, w, cache)
            elif k == "conv2d":
                gx, dw, db = nn.conv2d_backward(gy, w, cache, a["stride"], a["padding"])
            else:
                gx, dw, db = nn.depthwise_backward(gy, w, cache, a["stride"], a["padding"])
            if wmask is not None:
                dw = dw * wmask
            pgrads[layer.weight] = dw
            pgrads[layer.bias] = db
            _acc(grads, layer.inputs[0], gx)
        elif k in ("relu", "relu6"):
            _acc(grads, layer.inputs[0], gy * tape.caches[layer.name])
        elif k == "add":
            _acc(grads, layer.inputs[0], gy)
            _acc(grads, layer.inputs[1], gy)
        elif k == "concat":
            split = tape.caches[layer.name]
            _acc(grads, layer.inputs[0], gy[..., :split])
            _acc(grads, layer.inputs[1], gy[..., split:])
        elif k == "maxpool":
            _acc(grads, layer.inputs[0], nn.maxpool_backward(gy, tape.caches[layer.name], a["size"], a["stride"]))
        elif k == "avgpool":
            _acc(grads, layer.inputs[0], nn.avgpool_backward(gy, tape.caches[layer.name], a["size"], a["stride"]))
        elif k == "pad":
            _acc(grads, layer.inputs[0], nn.pad_backward(gy, a["padding"]))
    return pgrads


def loss_and_grad(g: ModelGraph, logits, targets):
    if g.task == "classification":
        return nn.cross_entropy(logits, np.asarray(targets, dtype=np.int64))
    return nn.mse(logits, np.asarray(targets, dtype=logits.dtype))


class SGD:
    """Plain SGD with momentum and decoupled-from-bias L2 weight decay."""

    def __init__(self, lr=0.05, momentum=0.9, weight_decay=0.0):
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity: dict = {}

    def step(self, params: dict, grads: dict):
        for name, gr in grads.items():
            p = params[name]
            if self.weight_decay and name.endswith(".weight"):
                gr = gr + self.weight_decay * p
            v = self.velocity.get(name)
            v = gr if v is None else self.momentum * v + gr
            self.velocity[name] = v
            params[name] = (p - self.lr * v).astype(p.dtype)


# ---------------------------------------------------------------------------
# Overflow shadow pass and alpha updates
# ---------------------------------------------------------------------------


def layer_overflow(g: ModelGraph, layer, x, acc: AccumulatorConfig) -> OverflowReport:
    """Count 16-bit holder overflow for one Conv/FC layer on float input ``x``.

    Centered weights outside int8 (only possible with asymmetric weights)
    count as overflow events as well, then are clipped for the accumulation.
    """
    pa = g.activation_params(layer.inputs[0])
    pw = g.weight_params(layer)
    q_a = quantize(x, pa)
    qw = quantize(g.params[layer.weight], pw).astype(np.int64) - pw.zero_point
    bad = int(((qw < -128) | (qw > 127)).sum())
    qw = np.clip(qw, -128, 127)
    a = layer.attrs
    if layer.kind == "fc":
        q2 = q_a.reshape(q_a.shape[0], -1)
        _, rep = accumulate_gemm(q2, qw, acc)
    else:
        depthwise = layer.kind == "depthwise"
        wmat = qw.reshape(-1, qw.shape[-1])
        _, rep, _ = conv_accumulate(q_a, wmat, pa.zero_point, a["kernel"], a["stride"],
                                    a["padding"], acc, depthwise)
    rep.events += bad
    return rep


def overflow_counts(g: ModelGraph, tape: Tape, acc: Optional[AccumulatorConfig] = None) -> dict:
    """Shadow integer pass over every Conv/FC layer using the tape's inputs."""
    acc = acc or AccumulatorConfig(width=16)
    return {l.name: layer_overflow(g, l, tape.env[l.inputs[0]], acc) for l in g.compute_layers()}


def slot_overflow(g: ModelGraph, reports: dict) -> dict:
    """Overflow count per slot: weight slots from their layer, activation slots
    summed over the Conv/FC layers that consume them."""
    out: dict = {}
    for layer in g.compute_layers():
        if layer.name not in reports:
            continue
        n = reports[layer.name].events
        out[layer.weight] = out.get(layer.weight, 0) + n
        src = g.slot_name(layer.inputs[0])
        out[src] = out.get(src, 0) + n
    return out


def apply_alpha_updates(g: ModelGraph, reports: dict, cfg: CalibConfig, step: int) -> dict:
    counts = slot_overflow(g, reports)
    for name, n in counts.items():
        slot = g.slots[name]
        if not slot.frozen:
            slot.alpha = update_alpha(slot.alpha, n, cfg, step)
    return counts


def prepare(g: ModelGraph, cfg: CalibConfig):
    """Set initial alphas and freeze the first layer's weight factor if asked."""
    for slot in g.slots.values():
        slot.alpha = cfg.alpha_init
        slot.observer = replace(slot.observer, momentum=cfg.momentum)
    layers = g.compute_layers()
    if layers and cfg.skip_first_layer_weights:
        first = g.weight_slot(layers[0])
        first.alpha = 1.0
        first.frozen = True


def qoat_step(
    g: ModelGraph,
    batch,
    cfg: CalibConfig,
    step: int,
    optimizer: Optional[SGD] = None,
    adapt: bool = True,
):
    """One QOAT step; returns ``(loss, reports)``.

    ``reports`` maps layer name to ``OverflowReport`` on shadow steps and is
    empty otherwise. Alpha updates are applied after the weight update.
    """
    x, y = batch
    tape = forward(g, x, quant=True, observe=True)
    loss, grad = loss_and_grad(g, tape.env[g.logits_name], y)
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss {loss} at step {step}")
    reports = {}
    if step % cfg.update_every == 0:
        reports = overflow_counts(g, tape, AccumulatorConfig(width=cfg.acc_bits))
    pgrads = backward(g, tape, grad)
    if optimizer is not None:
        optimizer.step(g.params, pgrads)
    if reports and adapt:
        apply_alpha_updates(g, reports, cfg, step)
    return loss, reports


def float_step(g: ModelGraph, batch, optimizer: SGD) -> float:
    x, y = batch
    tape = forward(g, x, quant=False)
    loss, grad = loss_and_grad(g, tape.env[g.logits_name], y)
    if not math.isfinite(loss):
        raise NumericError(f"non-finite loss {loss}")
    optimizer.step(g.params, backward(g, tape, grad))
    return loss


def observe_only(g: ModelGraph, x, batch_size: int = 256):
    """Run observers over ``x`` without touching weights (post-training calibration)."""
    x = np.asarray(x)
    for i in range(0, len(x), batch_size):
        forward(g, x[i : i + batch_size], quant=True, observe=True)
    for layer in g.compute_layers():
        g.weight_params(layer)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def train_toy(
    g: ModelGraph,
    dataset,
    epochs: int,
    cfg: CalibConfig = CalibConfig(),
    train: TrainConfig = TrainConfig(),
    quant: bool = True,
    max_steps: Optional[int] = None,
) -> ModelGraph:
    """Minibatch SGD with QOAT (``quant=True``) or plain float training.

    Zero epochs only initializes the observers. ``g.history`` receives one
    record per alpha-update event.
    """
    x, y = dataset
    x, y = np.asarray(x), np.asarray(y)
    n = len(x)
    rng = np.random.default_rng(train.seed)
    opt = SGD(train.lr, train.momentum, train.weight_decay)
    if quant:
        prepare(g, cfg)
    if epochs <= 0 or max_steps == 0:
        if quant:
            observe_only(g, x, train.batch_size)
        return g
    per_epoch = math.ceil(n / train.batch_size)
    total = epochs * per_epoch
    if max_steps is not None:
        total = min(total, max_steps)
    freeze_at = total - int(cfg.freeze_fraction * total)
    step = 0
    for _ in range(epochs):
        for idx in _batches(n, train.batch_size, rng):
            if step >= total:
                break
            batch = (x[idx], y[idx])
            if quant:
                loss, reports = qoat_step(g, batch, cfg, step, opt, adapt=step < freeze_at)
                if reports:
                    g.history.append({
                        "step": step,
                        "loss": loss,
                        "overflow": {k: r.events for k, r in reports.items()},
                        "alpha": {k: s.alpha for k, s in g.slots.items()},
                    })
            else:
                loss = float_step(g, batch, opt)
            step += 1
    log.info("trained %d steps, final loss %.4f", step, loss)
    return g


def predict_float(g: ModelGraph, x, quant: bool = True, batch_size: int = 512) -> np.ndarray:
    x = np.asarray(x)
    outs = []
    for i in range(0, len(x), batch_size):
        tape = forward(g, x[i : i + batch_size], quant=quant)
        outs.append(tape.env[g.logits_name])
    return np.concatenate(outs, axis=0)


def accuracy(logits, labels) -> float:
    return float(np.mean(np.argmax(logits, axis=-1) == np.asarray(labels)))
