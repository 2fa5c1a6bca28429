"""Overflow studies: Monte Carlo non-overflow ratio, injection sweeps and
per-layer range-factor reports."""

from __future__ import annotations

import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .engine import InjectionPlan, IntegerModel
from .graph import ModelGraph
from .kernels import ACC_WIDTHS, AccumulatorConfig, acc_range
from .quant import MAX_BITS, MIN_BITS, signed_range

DISTRIBUTIONS = ("uniform", "truncnormal")
# trials per independent random substream; fixed so results do not depend on threads
MC_BLOCK = 4096


@dataclass(frozen=True)
class McConfig:
    bits: tuple = (4, 5, 6, 7, 8)
    depths: tuple = (9, 64, 256, 1024)
    trials: int = 100_000
    accumulator_bits: int = 16
    seed: int = 0
    distribution: str = "uniform"

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if not self.depths or any(int(n) < 1 for n in self.depths):
            raise ValueError("depths must be positive")
        if not self.bits or any(not MIN_BITS <= int(b) <= MAX_BITS for b in self.bits):
            raise ValueError(f"bits must lie in [{MIN_BITS}, {MAX_BITS}]")
        if self.accumulator_bits not in ACC_WIDTHS:
            raise ValueError(f"accumulator_bits must be one of {ACC_WIDTHS}")
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(f"distribution must be one of {DISTRIBUTIONS}")


def _substream(seed: int, bits: int, depth: int, block: int) -> np.random.Generator:
    ss = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, bits, depth, block])
    return np.random.Generator(np.random.Philox(ss))


def sample_operands(rng: np.random.Generator, bits: int, shape, distribution: str = "uniform") -> np.ndarray:
    lo, hi = signed_range(bits)
    if distribution == "uniform":
        return rng.integers(lo, hi + 1, size=shape, dtype=np.int64)
    # zero-centred normal truncated to the range by resampling
    sigma = (hi - lo + 1) / 4.0
    out = np.rint(rng.normal(0.0, sigma, size=shape)).astype(np.int64)
    bad = (out < lo) | (out > hi)
    while bad.any():
        out[bad] = np.rint(rng.normal(0.0, sigma, size=int(bad.sum()))).astype(np.int64)
        bad = (out < lo) | (out > hi)
    return out


def _block_overflows(cfg: McConfig, bits: int, depth: int, block: int) -> int:
    start = block * MC_BLOCK
    n = min(MC_BLOCK, cfg.trials - start)
    rng = _substream(cfg.seed, bits, depth, block)
    a = sample_operands(rng, bits, (n, depth), cfg.distribution)
    b = sample_operands(rng, bits, (n, depth), cfg.distribution)
    partial = np.cumsum(a * b, axis=1)
    lo, hi = acc_range(cfg.accumulator_bits)
    return int(((partial < lo) | (partial > hi)).any(axis=1).sum())


def mc_non_overflow_ratio(cfg: McConfig, threads: int = 1) -> dict:
    """Fraction of trials whose running sum never leaves the holder range.

    Returns ``{(bits, depth): ratio}``. Each block of ``MC_BLOCK`` trials
    draws from its own counter-based stream keyed on (seed, bits, depth,
    block), so the table is identical for any ``threads``.
    """
    blocks = math.ceil(cfg.trials / MC_BLOCK)
    jobs = [(int(b), int(n), k) for b in cfg.bits for n in cfg.depths for k in range(blocks)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            counts = list(pool.map(lambda j: _block_overflows(cfg, *j), jobs))
    else:
        counts = [_block_overflows(cfg, *j) for j in jobs]
    table: dict = {}
    for (b, n, _), c in zip(jobs, counts):
        table[(b, n)] = table.get((b, n), 0) + c
    return {key: 1.0 - over / cfg.trials for key, over in table.items()}


def mc_rows(cfg: McConfig, table: dict) -> list:
    rows = []
    for (b, n), r in sorted(table.items()):
        se = math.sqrt(max(r * (1 - r), 0.0) / cfg.trials)
        rows.append({"bits": b, "depth": n, "trials": cfg.trials, "non_overflow_ratio": r, "std_error": se})
    return rows


# ---------------------------------------------------------------------------
# Injection
# ---------------------------------------------------------------------------

_NAMED = ("first", "second", "penultimate", "last", "all")


def select_layers(g: ModelGraph, selector: str) -> list:
    """Resolve a layer selector over the Conv/FC layers.

    Accepts comma-separated items: ``first``, ``second``, ``penultimate``,
    ``last``, ``all``, ``L<i>`` (index into the Conv/FC layers) or a layer name.
    """
    names = [l.name for l in g.compute_layers()]
    picked: list = []
    for item in (s.strip() for s in selector.split(",")):
        if not item:
            continue
        if item == "all":
            hits = names
        elif item in _NAMED:
            idx = {"first": 0, "second": 1, "penultimate": -2, "last": -1}[item]
            if (idx >= 0 and idx >= len(names)) or (idx < 0 and -idx > len(names)):
                raise ValueError(f"selector {item!r} needs more Conv/FC layers")
            hits = [names[idx]]
        elif re.fullmatch(r"L\d+", item):
            i = int(item[1:])
            if i >= len(names):
                raise ValueError(f"layer index {i} out of range")
            hits = [names[i]]
        elif item in names:
            hits = [item]
        else:
            raise ValueError(f"unknown layer selector {item!r}")
        picked += [h for h in hits if h not in picked]
    if not picked:
        raise ValueError("empty layer selection")
    return picked


@dataclass(frozen=True)
class InjectionSpec:
    target_layers: str = "all"
    ratio: float = 0.0
    mode: str = "wrap"
    level: str = "step"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError("ratio must be in [0, 1]")
        if self.mode not in ("wrap", "saturate"):
            raise ValueError("mode must be wrap or saturate")
        if self.level not in ("step", "output"):
            raise ValueError("level must be step or output")

    def plan(self, g: ModelGraph, ratio: Optional[float] = None) -> InjectionPlan:
        r = self.ratio if ratio is None else ratio
        return InjectionPlan({name: r for name in select_layers(g, self.target_layers)}, self.seed, self.level)


def metric(g: ModelGraph, outputs, targets) -> float:
    targets = np.asarray(targets)
    if g.task == "classification":
        return float(np.mean(np.argmax(outputs, axis=-1) == targets))
    return float(np.mean((outputs.reshape(targets.shape) - targets) ** 2))


def inject_overflow(
    g: ModelGraph,
    spec: InjectionSpec,
    eval_set,
    ratios=None,
    threads: int = 1,
    model: Optional[IntegerModel] = None,
) -> list:
    """Metric of 16-bit inference while forcing a seeded fraction of
    accumulation steps (or outputs) of the targeted layers out of range."""
    x, y = eval_set
    model = model or IntegerModel(g)
    acc = AccumulatorConfig(16, spec.mode)
    rows = []
    for r in (ratios if ratios is not None else [spec.ratio]):
        InjectionSpec(spec.target_layers, r, spec.mode, spec.level, spec.seed)  # validates r
        res = model.run(x, acc, injection=spec.plan(g, r), threads=threads)
        tot = res.total
        rows.append({"ratio": float(r), "metric": metric(g, res.outputs, y), "events": tot.events,
                     "steps": tot.steps, "layers": select_layers(g, spec.target_layers)})
    return rows


# ---------------------------------------------------------------------------
# Range-factor report
# ---------------------------------------------------------------------------


def effective_bits(bits: int, alpha: float) -> float:
    return bits - math.log2(alpha)


@dataclass
class AlphaRow:
    layer: str
    weight_alpha: float
    activation_alpha: float
    weight_bits: int
    activation_bits: int
    weight_effective_bits: float
    activation_effective_bits: float
    overflow: Optional[int] = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def alpha_report(g: ModelGraph, eval_x=None, sort_by: Optional[str] = None, threads: int = 1) -> list:
    """One row per Conv/FC layer with its weight and input-activation factors.

    With ``eval_x`` the 16-bit overflow count on that stream is included.
    """
    counts = {}
    if eval_x is not None:
        res = IntegerModel(g).run(eval_x, AccumulatorConfig(16), threads=threads)
        counts = {k: r.events for k, r in res.reports.items()}
    rows = []
    for layer in g.compute_layers():
        ws, as_ = g.weight_slot(layer), g.slot_for(layer.inputs[0])
        rows.append(AlphaRow(layer.name, ws.alpha, as_.alpha, ws.bits, as_.bits,
                             effective_bits(ws.bits, ws.alpha), effective_bits(as_.bits, as_.alpha),
                             counts.get(layer.name)))
    if sort_by:
        rows.sort(key=lambda r: getattr(r, sort_by))
    return rows
