"""Integer-only inference for a calibrated ``ModelGraph``.

Inputs are quantized once at the graph entry; from there every Conv/FC layer
runs through a ``QGemmPlan`` with the chosen accumulator, and elementwise ops
(activations, add, concat, pooling, padding) work on integers with
fixed-point rescaling. A trailing softmax is evaluated in float on the
dequantized logits.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .graph import COMPUTE_KINDS, ModelGraph
from .kernels import (
    AccumulatorConfig,
    Injector,
    OverflowReport,
    QGemmPlan,
    build_plan,
    oaq_conv2d,
    oaq_qgemm,
    pad_nhwc,
)
from .nn import softmax
from .quant import INT32_MAX, INT32_MIN, QuantParams, dequantize, derive_scale, quantize, rescale, round_half_away

log = logging.getLogger(__name__)

DEFAULT_CHUNK = 256


@dataclass
class InjectionPlan:
    """Per-layer injection ratios for one inference run."""

    ratios: dict
    seed: int = 0
    level: str = "step"

    def injector(self, layer_index: int, layer_name: str, chunk: int) -> Optional[Injector]:
        ratio = self.ratios.get(layer_name, 0.0)
        if ratio <= 0.0:
            return None
        rng = np.random.default_rng([self.seed, layer_index, chunk])
        return Injector(ratio, rng, self.level)


@dataclass
class InferenceResult:
    outputs: np.ndarray
    q_output: Optional[np.ndarray]
    reports: dict = field(default_factory=dict)

    @property
    def total(self) -> OverflowReport:
        return OverflowReport.total(self.reports.values())

    def predictions(self) -> np.ndarray:
        return np.argmax(self.outputs, axis=-1)


def _requant(q, p_in: QuantParams, p_out: QuantParams):
    if p_in == p_out:
        return np.asarray(q, dtype=np.int64)
    return p_out.zero_point + rescale(np.asarray(q, dtype=np.int64) - p_in.zero_point, p_in.step / p_out.step)


def _clip(q, p: QuantParams):
    return np.clip(q, p.qmin, p.qmax).astype(np.int64)


def _avgpool_int(q, size, stride):
    from .kernels import im2col_patches

    p = im2col_patches(q, size, stride, 0).astype(np.int64)
    s = p.sum(axis=3)
    taps = p.shape[3]
    mag = (2 * np.abs(s) + taps) // (2 * taps)
    return np.where(s < 0, -mag, mag)


def _maxpool_int(q, size, stride):
    from .kernels import im2col_patches

    return im2col_patches(q, size, stride, 0).max(axis=3).astype(np.int64)


class IntegerModel:
    """Compiled integer pipeline; compile once, run many batches."""

    def __init__(self, g: ModelGraph):
        g.validate()
        self.graph = g
        self.params: dict = {}
        self.plans: dict = {}
        self._compile()

    def _slot_params(self, tensor: str) -> QuantParams:
        name = self.graph.slot_name(tensor)
        if name not in self.params:
            self.params[name] = self.graph.slots[name].params()
        return self.params[name]

    def _compile(self):
        g = self.graph
        self._slot_params(g.input_name)
        for layer in g.layers:
            if layer.kind not in COMPUTE_KINDS:
                continue
            pa = self._slot_params(layer.inputs[0])
            pw = g.weight_params(layer)
            pc = self._slot_params(layer.output)
            ratio = pa.step * pw.step / pc.step
            if ratio >= 1.0:
                # output range too narrow for a sub-unit multiplier: widen it
                f = ratio * 1.01
                log.warning("%s: widening output range by %.3g so the multiplier stays below 1", layer.name, f)
                pc = derive_scale(pc.r_min * f, pc.r_max * f, pc.bits, pc.alpha, pc.symmetric)
                self.params[g.slot_name(layer.output)] = pc
            w = g.params[layer.weight]
            qw = quantize(w, pw).reshape(-1, w.shape[-1])
            bias = round_half_away(g.params[layer.bias].astype(np.float64) / (pa.step * pw.step))
            bias = np.clip(bias, INT32_MIN, INT32_MAX).astype(np.int64)
            self.plans[layer.name] = build_plan(qw, pa, pw, pc, layer_bias=bias,
                                                activation=layer.attrs["activation"])
        for layer in g.layers:
            if layer.kind != "softmax":
                self._slot_params(layer.output)

    def output_params(self) -> Optional[QuantParams]:
        g = self.graph
        last = g.layers[-1]
        name = last.inputs[0] if last.kind == "softmax" else last.output
        return self._slot_params(name)

    def _run_chunk(self, x, acc: AccumulatorConfig, injection: Optional[InjectionPlan], chunk: int, method: str):
        g = self.graph
        env = {g.input_name: quantize(x, self._slot_params(g.input_name)).astype(np.int64)}
        reports = {}
        out_float = None
        for li, layer in enumerate(g.layers):
            k, a = layer.kind, layer.attrs
            ins = [env[t] for t in layer.inputs]
            if k in COMPUTE_KINDS:
                plan: QGemmPlan = self.plans[layer.name]
                inj = injection.injector(li, layer.name, chunk) if injection else None
                if k == "fc":
                    x2 = ins[0].reshape(ins[0].shape[0], -1)
                    y, rep = oaq_qgemm(x2, plan, acc, inj)
                else:
                    y, rep = oaq_conv2d(ins[0], plan, a["kernel"], a["stride"], a["padding"], acc,
                                        depthwise=(k == "depthwise"), method=method, injector=inj)
                reports[layer.name] = rep
                env[layer.output] = y.astype(np.int64)
                continue
            if k == "softmax":
                p = self._slot_params(layer.inputs[0])
                out_float = softmax(dequantize(ins[0], p).astype(np.float64))
                env[layer.output] = None
                continue
            p_out = self._slot_params(layer.output)
            if k in ("relu", "relu6"):
                p_in = self._slot_params(layer.inputs[0])
                hi = int(quantize(6.0, p_in)) if k == "relu6" else p_in.qmax
                q = np.clip(ins[0], p_in.zero_point, hi)
                y = _clip(_requant(q, p_in, p_out), p_out)
            elif k == "add":
                p0, p1 = self._slot_params(layer.inputs[0]), self._slot_params(layer.inputs[1])
                s = (rescale(ins[0] - p0.zero_point, p0.step / p_out.step)
                     + rescale(ins[1] - p1.zero_point, p1.step / p_out.step))
                y = _clip(p_out.zero_point + s, p_out)
            elif k == "concat":
                parts = [_clip(_requant(q, self._slot_params(t), p_out), p_out)
                         for q, t in zip(ins, layer.inputs)]
                y = np.concatenate(parts, axis=-1)
            elif k == "maxpool":
                y = _maxpool_int(ins[0], a["size"], a["stride"])
            elif k == "avgpool":
                y = _avgpool_int(ins[0], a["size"], a["stride"])
            elif k == "pad":
                y = pad_nhwc(ins[0], a["padding"], p_out.zero_point)
            else:  # pragma: no cover
                raise ValueError(k)
            env[layer.output] = y
        last = g.layers[-1]
        q_out = env[last.inputs[0]] if last.kind == "softmax" else env[last.output]
        if out_float is None:
            out_float = dequantize(q_out, self.output_params())
        return out_float, q_out, reports

    def run(
        self,
        x,
        acc: AccumulatorConfig = AccumulatorConfig(),
        injection: Optional[InjectionPlan] = None,
        chunk_size: int = DEFAULT_CHUNK,
        threads: int = 1,
        method: str = "im2col",
    ) -> InferenceResult:
        """Integer inference over ``x`` in fixed row chunks.

        Chunking is fixed by ``chunk_size`` and each chunk draws injection
        noise from its own seeded stream, so results do not depend on
        ``threads``.
        """
        x = np.asarray(x)
        starts = list(range(0, len(x), chunk_size))

        def job(ci):
            s = starts[ci]
            return self._run_chunk(x[s : s + chunk_size], acc, injection, ci, method)

        if threads > 1 and len(starts) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                parts = list(pool.map(job, range(len(starts))))
        else:
            parts = [job(ci) for ci in range(len(starts))]
        outputs = np.concatenate([p[0] for p in parts], axis=0)
        q_out = np.concatenate([p[1] for p in parts], axis=0)
        reports = {
            name: OverflowReport.concat([p[2][name] for p in parts])
            for name in (parts[0][2] if parts else {})
        }
        return InferenceResult(outputs, q_out, reports)


def integer_accuracy(model: IntegerModel, x, y, acc: AccumulatorConfig = AccumulatorConfig(), **kw):
    res = model.run(x, acc, **kw)
    return float(np.mean(res.predictions() == np.asarray(y))), res
