"""Layer graph with per-tensor quantization records.

Every activation produced by the input, a Conv/FC layer (after its fused
activation), a standalone activation or a merge op owns a ``TensorSlot``:
its observed range, its range-mapping factor and its bit-width. Outputs of
max-pool, avg-pool and padding reuse the slot of their input. Every Conv/FC
weight tensor owns a weight slot. Fake and real quantization of a tensor both
read the same slot, so changing ``alpha`` affects both at once.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .kernels import conv_output_size
from .quant import QuantParams, derive_scale

COMPUTE_KINDS = ("fc", "conv2d", "depthwise")
ACTIVATION_KINDS = ("relu", "relu6")
MERGE_KINDS = ("add", "concat")
PASS_KINDS = ("maxpool", "avgpool", "pad")
LAYER_KINDS = COMPUTE_KINDS + ACTIVATION_KINDS + MERGE_KINDS + PASS_KINDS + ("softmax",)
FUSED_ACTIVATIONS = ("none", "relu", "relu6")

_REQUIRED_ATTRS = {
    "fc": {"units", "activation"},
    "conv2d": {"filters", "kernel", "stride", "padding", "activation"},
    "depthwise": {"kernel", "stride", "padding", "activation"},
    "maxpool": {"size", "stride"},
    "avgpool": {"size", "stride"},
    "pad": {"padding"},
}
_ARITY = {"add": 2, "concat": 2}


class GraphError(ValueError):
    pass


@dataclass
class LayerSpec:
    name: str
    kind: str
    inputs: list
    output: str
    attrs: dict = field(default_factory=dict)

    @property
    def weight(self) -> str:
        return f"{self.name}.weight"

    @property
    def bias(self) -> str:
        return f"{self.name}.bias"

    def check(self):
        if self.kind not in LAYER_KINDS:
            raise GraphError(f"{self.name}: unknown layer kind {self.kind!r}")
        need = _REQUIRED_ATTRS.get(self.kind, set())
        missing = need - set(self.attrs)
        if missing:
            raise GraphError(f"{self.name}: missing attributes {sorted(missing)}")
        if self.kind in COMPUTE_KINDS and self.attrs["activation"] not in FUSED_ACTIVATIONS:
            raise GraphError(f"{self.name}: bad fused activation {self.attrs['activation']!r}")
        arity = _ARITY.get(self.kind, 1)
        if len(self.inputs) != arity:
            raise GraphError(f"{self.name}: {self.kind} takes {arity} input(s)")

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "inputs": list(self.inputs),
                "output": self.output, "attrs": _jsonable(self.attrs)}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(d["name"], d["kind"], list(d["inputs"]), d["output"], dict(d.get("attrs", {})))


def _jsonable(attrs: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in attrs.items()}


@dataclass(frozen=True)
class RangeObserver:
    r_min: float = 0.0
    r_max: float = 0.0
    momentum: float = 0.99
    initialized: bool = False

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("momentum must be in (0, 1)")
        if self.initialized and self.r_min > self.r_max:
            raise ValueError("r_min > r_max")


@dataclass
class TensorSlot:
    name: str
    role: str  # "activation" | "weight"
    bits: int = 8
    symmetric: bool = False
    alpha: float = 1.0
    observer: RangeObserver = field(default_factory=RangeObserver)
    frozen: bool = False

    def params(self, alpha: Optional[float] = None) -> QuantParams:
        if not self.observer.initialized:
            raise GraphError(f"slot {self.name!r} has no observed range yet")
        return derive_scale(self.observer.r_min, self.observer.r_max, self.bits,
                            self.alpha if alpha is None else alpha, self.symmetric)

    def set_extremes(self, t: np.ndarray):
        """Replace the range with the current extremes of ``t`` (no smoothing)."""
        self.observer = replace(self.observer, r_min=float(np.min(t)), r_max=float(np.max(t)),
                                initialized=True)

    def to_dict(self) -> dict:
        o = self.observer
        return {"name": self.name, "role": self.role, "bits": self.bits,
                "symmetric": self.symmetric, "alpha": self.alpha, "frozen": self.frozen,
                "observer": {"r_min": o.r_min, "r_max": o.r_max, "momentum": o.momentum,
                             "initialized": o.initialized}}

    @classmethod
    def from_dict(cls, d: dict) -> "TensorSlot":
        o = d["observer"]
        return cls(d["name"], d["role"], int(d["bits"]), bool(d["symmetric"]), float(d["alpha"]),
                   RangeObserver(float(o["r_min"]), float(o["r_max"]), float(o["momentum"]),
                                 bool(o["initialized"])),
                   bool(d.get("frozen", False)))


@dataclass
class ModelGraph:
    input_shape: tuple
    layers: list
    params: dict
    slots: dict
    aliases: dict = field(default_factory=dict)
    input_name: str = "input"
    task: str = "classification"
    history: list = field(default_factory=list)

    # --- structure -------------------------------------------------------

    @property
    def output_name(self) -> str:
        return self.layers[-1].output if self.layers else self.input_name

    @property
    def logits_name(self) -> str:
        """Tensor the training loss reads (the softmax input when a softmax ends the graph)."""
        last = self.layers[-1] if self.layers else None
        if last is not None and last.kind == "softmax":
            return last.inputs[0]
        return self.output_name

    def compute_layers(self) -> list:
        return [l for l in self.layers if l.kind in COMPUTE_KINDS]

    def layer(self, name: str) -> LayerSpec:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def slot_name(self, tensor: str) -> str:
        seen = set()
        while tensor in self.aliases:
            if tensor in seen:
                raise GraphError(f"alias cycle at {tensor!r}")
            seen.add(tensor)
            tensor = self.aliases[tensor]
        return tensor

    def slot_for(self, tensor: str) -> TensorSlot:
        return self.slots[self.slot_name(tensor)]

    def weight_slot(self, layer: LayerSpec) -> TensorSlot:
        return self.slots[layer.weight]

    def consumers(self, tensor: str) -> list:
        return [l for l in self.layers if tensor in l.inputs]

    def activation_params(self, tensor: str) -> QuantParams:
        return self.slot_for(tensor).params()

    def weight_params(self, layer: LayerSpec) -> QuantParams:
        slot = self.weight_slot(layer)
        slot.set_extremes(self.params[layer.weight])
        return slot.params()

    def validate(self):
        defined = {self.input_name}
        if self.input_name not in self.slots:
            raise GraphError("graph input has no quantization slot")
        names = set()
        for i, layer in enumerate(self.layers):
            layer.check()
            if layer.name in names:
                raise GraphError(f"duplicate layer name {layer.name!r}")
            names.add(layer.name)
            for t in layer.inputs:
                if t not in defined:
                    raise GraphError(f"{layer.name}: input {t!r} used before definition (graph must be acyclic)")
            if layer.output in defined:
                raise GraphError(f"{layer.name}: tensor {layer.output!r} defined twice")
            defined.add(layer.output)
            if layer.kind == "softmax":
                if i != len(self.layers) - 1:
                    raise GraphError("softmax is only supported as the final layer")
                continue
            if layer.kind in PASS_KINDS:
                if self.aliases.get(layer.output) != layer.inputs[0] or layer.output in self.slots:
                    raise GraphError(f"{layer.name}: {layer.kind} output must reuse its input's slot")
            else:
                if layer.output not in self.slots or layer.output in self.aliases:
                    raise GraphError(f"{layer.name}: output {layer.output!r} needs its own fake-quant slot")
            if layer.kind in COMPUTE_KINDS:
                src = self.slot_name(layer.inputs[0])
                if src not in self.slots:
                    raise GraphError(f"{layer.name}: input has no real-quantization slot")
                if layer.weight not in self.params or layer.bias not in self.params:
                    raise GraphError(f"{layer.name}: missing weight or bias")
                if layer.weight not in self.slots:
                    raise GraphError(f"{layer.name}: weight has no quantization slot")

    def copy(self) -> "ModelGraph":
        return ModelGraph(
            input_shape=tuple(self.input_shape),
            layers=[LayerSpec(l.name, l.kind, list(l.inputs), l.output, dict(l.attrs)) for l in self.layers],
            params={k: v.copy() for k, v in self.params.items()},
            slots={k: replace(v) for k, v in self.slots.items()},
            aliases=dict(self.aliases),
            input_name=self.input_name,
            task=self.task,
        )


class GraphBuilder:
    """Incrementally builds a ``ModelGraph`` with He-normal initial weights.

    >>> b = GraphBuilder((4,), seed=0)
    >>> h = b.fc(b.input, 8, activation="relu")
    >>> g = b.build()
    """

    def __init__(self, input_shape, seed: int = 0, bits: int = 8, momentum: float = 0.99,
                 dtype=np.float32, symmetric_weights: bool = True):
        self.rng = np.random.default_rng(seed)
        self.bits = bits
        self.momentum = momentum
        self.dtype = dtype
        self.symmetric_weights = symmetric_weights
        self.input = "input"
        self.shapes = {self.input: tuple(input_shape)}
        self.layers: list = []
        self.params: dict = {}
        self.aliases: dict = {}
        self.slots: dict = {}
        self._add_act_slot(self.input)

    def _add_act_slot(self, tensor: str):
        self.slots[tensor] = TensorSlot(tensor, "activation", self.bits, False, 1.0,
                                        RangeObserver(momentum=self.momentum))

    def _name(self, kind: str) -> str:
        return f"{kind}{len(self.layers)}"

    def _add(self, kind, inputs, attrs, shape, slot=True):
        name = self._name(kind)
        out = name
        layer = LayerSpec(name, kind, list(inputs), out, attrs)
        layer.check()
        self.layers.append(layer)
        self.shapes[out] = tuple(shape)
        if kind in PASS_KINDS:
            self.aliases[out] = inputs[0]
        elif slot:
            self._add_act_slot(out)
        return layer

    def _weights(self, layer: LayerSpec, shape, fan_in: int):
        std = math.sqrt(2.0 / fan_in)
        self.params[layer.weight] = (self.rng.standard_normal(shape) * std).astype(self.dtype)
        self.params[layer.bias] = np.zeros(shape[-1], dtype=self.dtype)
        self.slots[layer.weight] = TensorSlot(layer.weight, "weight", self.bits,
                                              self.symmetric_weights, 1.0,
                                              RangeObserver(momentum=self.momentum))

    def fc(self, x: str, units: int, activation: str = "none") -> str:
        fan_in = int(np.prod(self.shapes[x]))
        layer = self._add("fc", [x], {"units": units, "activation": activation}, (units,))
        self._weights(layer, (fan_in, units), fan_in)
        return layer.output

    def conv2d(self, x: str, filters: int, kernel=3, stride=1, padding=0, activation="none") -> str:
        h, w, c = self.shapes[x]
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        oh, ow = conv_output_size(h, w, (kh, kw), stride, padding)
        layer = self._add("conv2d", [x], {"filters": filters, "kernel": [kh, kw], "stride": stride,
                                          "padding": padding, "activation": activation},
                          (oh, ow, filters))
        self._weights(layer, (kh, kw, c, filters), kh * kw * c)
        return layer.output

    def depthwise(self, x: str, kernel=3, stride=1, padding=0, activation="none") -> str:
        h, w, c = self.shapes[x]
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        oh, ow = conv_output_size(h, w, (kh, kw), stride, padding)
        layer = self._add("depthwise", [x], {"kernel": [kh, kw], "stride": stride,
                                             "padding": padding, "activation": activation},
                          (oh, ow, c))
        self._weights(layer, (kh, kw, c), kh * kw)
        return layer.output

    def relu(self, x: str) -> str:
        return self._add("relu", [x], {}, self.shapes[x]).output

    def relu6(self, x: str) -> str:
        return self._add("relu6", [x], {}, self.shapes[x]).output

    def add(self, a: str, b: str) -> str:
        if self.shapes[a] != self.shapes[b]:
            raise GraphError(f"add shape mismatch {self.shapes[a]} vs {self.shapes[b]}")
        return self._add("add", [a, b], {}, self.shapes[a]).output

    def concat(self, a: str, b: str) -> str:
        sa, sb = self.shapes[a], self.shapes[b]
        if sa[:-1] != sb[:-1]:
            raise GraphError(f"concat shape mismatch {sa} vs {sb}")
        return self._add("concat", [a, b], {}, sa[:-1] + (sa[-1] + sb[-1],)).output

    def maxpool(self, x: str, size: int = 2, stride: int = 2) -> str:
        h, w, c = self.shapes[x]
        return self._add("maxpool", [x], {"size": size, "stride": stride},
                         ((h - size) // stride + 1, (w - size) // stride + 1, c)).output

    def avgpool(self, x: str, size: int = 2, stride: int = 2) -> str:
        h, w, c = self.shapes[x]
        return self._add("avgpool", [x], {"size": size, "stride": stride},
                         ((h - size) // stride + 1, (w - size) // stride + 1, c)).output

    def pad(self, x: str, padding: int = 1) -> str:
        h, w, c = self.shapes[x]
        return self._add("pad", [x], {"padding": padding}, (h + 2 * padding, w + 2 * padding, c)).output

    def softmax(self, x: str) -> str:
        return self._add("softmax", [x], {}, self.shapes[x], slot=False).output

    def build(self, task: str = "classification") -> ModelGraph:
        g = ModelGraph(self.shapes[self.input], list(self.layers), dict(self.params),
                       dict(self.slots), dict(self.aliases), self.input, task)
        g.validate()
        return g


def mlp(in_features: int, hidden, classes: int, seed: int = 0, **kw) -> ModelGraph:
    """Fully-connected classifier: ReLU hidden layers, linear logits, softmax."""
    b = GraphBuilder((in_features,), seed=seed, **kw)
    x = b.input
    for h in hidden:
        x = b.fc(x, h, activation="relu")
    x = b.fc(x, classes)
    b.softmax(x)
    return b.build()


def small_cnn(input_shape=(8, 8, 1), classes: int = 10, seed: int = 0, **kw) -> ModelGraph:
    """Depthwise-separable toy CNN exercising every spatial layer kind."""
    b = GraphBuilder(tuple(input_shape), seed=seed, **kw)
    x = b.conv2d(b.input, 8, kernel=3, padding=1, activation="relu6")
    y = b.depthwise(x, kernel=3, padding=1, activation="relu6")
    y = b.conv2d(y, 8, kernel=1)
    x = b.relu(b.add(x, y))
    x = b.maxpool(x, 2, 2)
    z = b.pad(x, 1)
    z = b.depthwise(z, kernel=3, stride=2, activation="relu")
    x = b.avgpool(x, 2, 2)
    x = b.concat(x, z)
    x = b.fc(x, classes)
    b.softmax(x)
    return b.build()
