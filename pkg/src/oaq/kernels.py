"""Quantized GEMM and convolution with a selectable accumulator width.

The inner sum ``sum_j q_a[i, j] * qhat_b[j, k]`` is accumulated in canonical
ascending ``j`` order inside a 16- or 32-bit holder. Every step whose running
sum leaves the holder's range is an overflow event; the holder then wraps
(two's complement) or saturates. The bias term ``B`` and the requantization
multiplier are applied afterwards in 32-bit arithmetic.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional

import numpy as np

from .quant import (
    FixedPointMultiplier,
    QuantParams,
    apply_multiplier,
    compile_multiplier,
    quantize,
)

ACC_WIDTHS = (16, 32)
POLICIES = ("wrap", "saturate")
INT8_MIN, INT8_MAX = -128, 127

# elements per product chunk handed to the accumulator
_CHUNK_ELEMS = 1 << 22


def acc_range(width: int) -> tuple[int, int]:
    return -(1 << (width - 1)), (1 << (width - 1)) - 1


def wrap_to(x, width: int):
    """Two's-complement wrap of an integer array into ``width`` bits (dtype kept)."""
    x = np.asarray(x)
    if x.dtype == np.int32 and width <= 16:
        half, mask = np.int32(1 << (width - 1)), np.int32((1 << width) - 1)
    else:
        x = x.astype(np.int64, copy=False)
        half, mask = np.int64(1 << (width - 1)), np.int64((1 << width) - 1)
    return ((x + half) & mask) - half


class CenteredWeightOverflowError(ValueError):
    """Centered weights ``q_b - Z_b`` leave the signed 8-bit range."""

    def __init__(self, indices: np.ndarray):
        self.indices = indices
        shown = ", ".join(str(tuple(int(v) for v in ix)) for ix in indices[:5])
        more = f" (+{len(indices) - 5} more)" if len(indices) > 5 else ""
        super().__init__(
            f"{len(indices)} centered weight(s) outside [-128, 127] at {shown}{more}"
        )


@dataclass(frozen=True)
class AccumulatorConfig:
    width: int = 16
    overflow_policy: str = "wrap"
    count_events: bool = True
    # >1 splits the reduction into interleaved lanes merged at the end
    lanes: int = 1

    def __post_init__(self):
        if self.width not in ACC_WIDTHS:
            raise ValueError(f"accumulator width must be one of {ACC_WIDTHS}")
        if self.overflow_policy not in POLICIES:
            raise ValueError(f"overflow_policy must be one of {POLICIES}")
        if self.lanes < 1:
            raise ValueError("lanes must be >= 1")


@dataclass(eq=False)
class OverflowReport:
    events: int = 0
    steps: int = 0
    flags: Optional[np.ndarray] = None
    first_event: Optional[tuple] = None
    # affected-output count for aggregates that no longer hold per-output flags
    affected_count: Optional[int] = None

    @property
    def affected(self) -> int:
        if self.flags is None:
            return self.affected_count or 0
        return int(self.flags.sum())

    def summary(self) -> dict:
        return {
            "events": int(self.events),
            "steps": int(self.steps),
            "affected_outputs": self.affected,
            "first_event": None if self.first_event is None else [int(v) for v in self.first_event],
        }

    @staticmethod
    def concat(reports: list["OverflowReport"]) -> "OverflowReport":
        """Join reports of row blocks of the same layer (rows stacked in order)."""
        events = sum(r.events for r in reports)
        steps = sum(r.steps for r in reports)
        flags = None
        if reports and all(r.flags is not None for r in reports):
            flags = np.concatenate([r.flags for r in reports], axis=0)
        first = None
        offset = 0
        for r in reports:
            if r.first_event is not None:
                cand = (r.first_event[0] + offset,) + tuple(r.first_event[1:])
                first = cand if first is None else min(first, cand)
            if r.flags is not None:
                offset += r.flags.shape[0]
        return OverflowReport(events, steps, flags, first)

    @staticmethod
    def total(reports: Iterable["OverflowReport"]) -> "OverflowReport":
        reports = list(reports)
        return OverflowReport(
            events=sum(r.events for r in reports),
            steps=sum(r.steps for r in reports),
            affected_count=sum(r.affected for r in reports),
        )


@dataclass
class Injector:
    """Forces a seeded fraction of accumulation steps (or final sums) out of range."""

    ratio: float
    rng: np.random.Generator
    level: str = "step"

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ValueError("injection ratio must be in [0, 1]")
        if self.level not in ("step", "output"):
            raise ValueError("injection level must be 'step' or 'output'")

    def mask(self, shape) -> Optional[np.ndarray]:
        if self.ratio == 0.0:
            return None
        return self.rng.random(shape) < self.ratio


def _first_j(ev: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    hit = ev.any(axis=0)
    return hit, ev.argmax(axis=0)


def _finish_report(events, steps, flags, first_j, out_shape, count) -> OverflowReport:
    if not count:
        return OverflowReport(events=0, steps=steps)
    first = None
    if events:
        flat = int(np.flatnonzero(flags.reshape(-1))[0])
        idx = np.unravel_index(flat, out_shape)
        first = tuple(int(v) for v in idx) + (int(first_j.reshape(-1)[flat]),)
    return OverflowReport(events=int(events), steps=steps, flags=flags, first_event=first)


def _accumulate_wrap(chunks, out_shape, width, count, injector):
    # The held value is the exact running sum reduced mod 2**width, so the
    # whole stream can be scanned with cumsum; an injected step adds 2**(w-1),
    # which is the same residue whichever sign was chosen.
    # For 16-bit holders only the residue mod 2**16 matters and int32
    # wraparound preserves it, so chunks with small products scan in int32.
    lo, hi = acc_range(width)
    half = np.int64(1 << (width - 1))
    exact = np.zeros(out_shape, dtype=np.int64)
    flags = np.zeros(out_shape, dtype=bool)
    first_j = np.full(out_shape, -1, dtype=np.int64)
    events = 0
    j0 = 0
    inject = injector is not None and injector.level == "step"
    for prod in chunks:
        narrow = width <= 16 and _absmax(prod) < 1 << 30
        dt = np.int32 if narrow else np.int64
        prod = prod.astype(dt, copy=False)
        base = (wrap_to(exact, width) if narrow else exact).astype(dt)
        stream = prod
        inj = injector.mask(prod.shape) if inject else None
        if inj is not None:
            stream = prod + dt(half) * inj
        run = np.cumsum(stream, axis=0, dtype=dt)
        run += base
        if count or inj is not None:
            prev = np.empty_like(run)
            prev[0] = base
            prev[1:] = run[:-1]
            v = wrap_to(prev, width) + prod
            ev = (v < lo) | (v > hi)
            if inj is not None:
                ev |= inj
            hit, arg = _first_j(ev)
            new = hit & (first_j < 0)
            first_j[new] = j0 + arg[new]
            flags |= hit
            events += int(ev.sum())
        exact = run[-1].astype(np.int64)
        j0 += prod.shape[0]
    held = wrap_to(exact, width)
    if injector is not None and injector.level == "output":
        inj = injector.mask(out_shape)
        if inj is not None:
            held = wrap_to(held + half * inj, width)
            first_j[inj & (first_j < 0)] = max(j0 - 1, 0)
            flags |= inj
            events += int(inj.sum())
    steps = j0 * int(np.prod(out_shape))
    return held, _finish_report(events, steps, flags, first_j, out_shape, count)


def _accumulate_loop(chunks, out_shape, cfg: AccumulatorConfig, injector):
    lo, hi = acc_range(cfg.width)
    half = np.int64(1 << (cfg.width - 1))
    lanes = cfg.lanes
    held = np.zeros((lanes,) + tuple(out_shape), dtype=np.int64)
    flags = np.zeros(out_shape, dtype=bool)
    first_j = np.full(out_shape, -1, dtype=np.int64)
    events = 0
    j = 0
    saturate = cfg.overflow_policy == "saturate"

    def step(cur, add, inj, jj):
        nonlocal events
        v = cur + add
        if inj is not None:
            v = v + np.where(v >= 0, half, -half) * inj
        ev = (v < lo) | (v > hi)
        if ev.any():
            events += int(ev.sum())
            new = ev & (first_j < 0)
            first_j[new] = jj
            flags[...] |= ev
        return np.clip(v, lo, hi) if saturate else wrap_to(v, cfg.width)

    inject = injector is not None and injector.level == "step"
    for prod in chunks:
        prod = prod.astype(np.int64, copy=False)
        inj_chunk = injector.mask(prod.shape) if inject else None
        for r in range(prod.shape[0]):
            lane = j % lanes
            inj = None if inj_chunk is None else inj_chunk[r]
            held[lane] = step(held[lane], prod[r], inj, j)
            j += 1
    depth = j
    total = held[0]
    for lane in range(1, lanes):
        total = step(total, held[lane], None, depth + lane - 1)
        j += 1
    if injector is not None and injector.level == "output":
        inj = injector.mask(out_shape)
        if inj is not None:
            total = step(total, np.zeros_like(total), inj, max(depth - 1, 0))
    steps = j * int(np.prod(out_shape))
    return total, _finish_report(events, steps, flags, first_j, out_shape, cfg.count_events)


def accumulate(
    chunks: Iterable[np.ndarray],
    out_shape: tuple,
    cfg: AccumulatorConfig,
    injector: Optional[Injector] = None,
) -> tuple[np.ndarray, OverflowReport]:
    """Accumulate per-step product chunks of shape ``(steps, *out_shape)``.

    Returns the final holder contents (int64) and the overflow report.
    """
    out_shape = tuple(out_shape)
    if cfg.lanes > 1 or cfg.overflow_policy == "saturate":
        return _accumulate_loop(chunks, out_shape, cfg, injector)
    return _accumulate_wrap(chunks, out_shape, cfg.width, cfg.count_events, injector)


def _block(rows: int, cols: int) -> int:
    return max(1, _CHUNK_ELEMS // max(1, rows * cols))


def _absmax(x: np.ndarray) -> int:
    if x.size == 0:
        return 0
    return max(abs(int(x.min())), abs(int(x.max())))


def gemm_chunks(q_a: np.ndarray, w: np.ndarray) -> Iterator[np.ndarray]:
    """Products ``q_a[i, j] * w[j, k]`` grouped by ascending ``j``."""
    m, n = q_a.shape
    k = w.shape[1]
    small = max(_absmax(q_a), 1) * max(_absmax(w), 1) < 1 << 30
    dt = np.int32 if small else np.int64
    a = q_a.astype(dt)
    w = w.astype(dt)
    step = _block(m, k)
    for j0 in range(0, n, step):
        j1 = min(n, j0 + step)
        yield a[:, j0:j1].T[:, :, None] * w[j0:j1, None, :]


def _exact_matmul(a: np.ndarray, w: np.ndarray) -> np.ndarray:
    # float64 BLAS is exact while every partial sum stays below 2**53
    if max(_absmax(a), 1) * max(_absmax(w), 1) * max(a.shape[1], 1) < 1 << 52:
        return np.rint(a.astype(np.float64) @ w.astype(np.float64)).astype(np.int64)
    return a.astype(np.int64) @ w.astype(np.int64)


def accumulate_gemm(
    q_a: np.ndarray,
    w: np.ndarray,
    cfg: AccumulatorConfig = AccumulatorConfig(),
    injector: Optional[Injector] = None,
) -> tuple[np.ndarray, OverflowReport]:
    """``accumulate(gemm_chunks(q_a, w), ...)`` that only replays risky outputs.

    An output whose ``sum_j |q_a[i, j] * w[j, k]|`` fits the holder cannot
    overflow at any step or lane merge, so its holder value is the exact dot
    product. Only the remaining rows x columns are replayed step by step.
    Injection needs every step, so it always takes the full path.
    """
    q_a, w = np.asarray(q_a), np.asarray(w)
    m, n = q_a.shape
    k = w.shape[1]
    if injector is not None or n == 0 or m == 0 or k == 0:
        return accumulate(gemm_chunks(q_a, w), (m, k), cfg, injector)
    _, hi = acc_range(cfg.width)
    held = _exact_matmul(q_a, w)
    l1 = _exact_matmul(np.abs(q_a), np.abs(w))
    risky = l1 > hi
    steps = (n + cfg.lanes - 1) * m * k
    if not risky.any():
        if not cfg.count_events:
            return held, OverflowReport(steps=steps)
        return held, OverflowReport(events=0, steps=steps, flags=np.zeros((m, k), dtype=bool))
    rows = np.flatnonzero(risky.any(axis=1))
    cols = np.flatnonzero(risky.any(axis=0))
    sub_held, sub = accumulate(gemm_chunks(q_a[rows], w[:, cols]), (rows.size, cols.size), cfg)
    held[np.ix_(rows, cols)] = sub_held
    if not cfg.count_events:
        return held, OverflowReport(steps=steps)
    flags = np.zeros((m, k), dtype=bool)
    flags[np.ix_(rows, cols)] = sub.flags
    first = None
    if sub.first_event is not None:
        r, c, j = sub.first_event
        first = (int(rows[r]), int(cols[c]), j)
    return held, OverflowReport(events=sub.events, steps=steps, flags=flags, first_event=first)


# ---------------------------------------------------------------------------
# GEMM
# ---------------------------------------------------------------------------


def requant_multiplier(pa: QuantParams, pb: QuantParams, pc: QuantParams) -> FixedPointMultiplier:
    return compile_multiplier(pa.step * pb.step / pc.step)


def _check_int8(name: str, q: np.ndarray):
    if q.size and (q.min() < INT8_MIN or q.max() > INT8_MAX):
        raise ValueError(f"{name} leaves the signed 8-bit range")


def reference_qgemm(
    q_a: np.ndarray,
    q_b: np.ndarray,
    params_a: QuantParams,
    params_b: QuantParams,
    params_c: QuantParams,
    form: str = "direct",
    return_acc: bool = False,
):
    """Exact quantized matmul with 64-bit accumulation.

    ``form="direct"`` sums ``(q_a - Z_a)(q_b - Z_b)``; ``form="expanded"``
    uses the zero-point expansion with row and column sums. Both give the same
    integers by construction.
    """
    q_a = np.asarray(q_a, dtype=np.int64)
    q_b = np.asarray(q_b, dtype=np.int64)
    if q_a.ndim != 2 or q_b.ndim != 2 or q_a.shape[1] != q_b.shape[0]:
        raise ValueError(f"dimension mismatch: {q_a.shape} x {q_b.shape}")
    _check_int8("q_a", q_a)
    _check_int8("q_b", q_b)
    za, zb = params_a.zero_point, params_b.zero_point
    n = q_a.shape[1]
    if form == "direct":
        acc = (q_a - za) @ (q_b - zb)
    elif form == "expanded":
        m_a = q_a.sum(axis=1)
        m_b = q_b.sum(axis=0)
        acc = n * za * zb - za * m_b[None, :] - zb * m_a[:, None] + q_a @ q_b
    else:
        raise ValueError(f"unknown form {form!r}")
    m = requant_multiplier(params_a, params_b, params_c)
    out = np.clip(params_c.zero_point + apply_multiplier(acc, m), params_c.qmin, params_c.qmax)
    return (out, acc) if return_acc else out


@dataclass(eq=False)
class QGemmPlan:
    q_weights: np.ndarray
    centered_weights: np.ndarray
    bias_term: np.ndarray
    col_sums: np.ndarray
    multiplier: FixedPointMultiplier
    z_out: int
    depth: int
    z_in: int
    z_weights: int
    out_min: int
    out_max: int
    layer_bias: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.layer_bias is None:
            self.layer_bias = np.zeros(self.q_weights.shape[1], dtype=np.int64)

    @property
    def out_features(self) -> int:
        return self.q_weights.shape[1]

    def verify(self):
        """Recompute the precomputed constants and compare exactly."""
        q = self.q_weights.astype(np.int64)
        centered = q - self.z_weights
        col = q.sum(axis=0)
        bias = -self.z_in * col + self.depth * self.z_in * self.z_weights
        if not np.array_equal(centered, self.centered_weights):
            raise ValueError("centered weights do not match q_weights - Z_b")
        if not np.array_equal(col, self.col_sums):
            raise ValueError("column sums do not match q_weights")
        if not np.array_equal(bias, self.bias_term):
            raise ValueError("bias term does not match recomputation")


def build_plan(
    q_weights: np.ndarray,
    params_a: QuantParams,
    params_b: QuantParams,
    params_c: QuantParams,
    depth: Optional[int] = None,
    layer_bias: Optional[np.ndarray] = None,
    activation: str = "none",
) -> QGemmPlan:
    """Precompute centered weights, the zero-point bias term and the multiplier.

    ``q_weights`` has shape ``(depth, out_features)``. ``layer_bias`` is an
    int32 bias already expressed in units of ``S_a * S_b``. ``activation``
    folds a trailing ReLU/ReLU6 into the output clamp.
    """
    q = np.asarray(q_weights, dtype=np.int64)
    if q.ndim != 2:
        raise ValueError("q_weights must be 2-D (depth, out_features)")
    _check_int8("q_weights", q)
    n = q.shape[0]
    if depth is not None and depth != n:
        raise ValueError(f"depth {depth} does not match weights with {n} rows")
    za, zb = params_a.zero_point, params_b.zero_point
    centered = q - zb
    bad = np.argwhere((centered < INT8_MIN) | (centered > INT8_MAX))
    if len(bad):
        raise CenteredWeightOverflowError(bad)
    col = q.sum(axis=0)
    bias = -za * col + n * za * zb

    out_min, out_max = params_c.qmin, params_c.qmax
    if activation in ("relu", "relu6"):
        out_min = max(out_min, params_c.zero_point)
    if activation == "relu6":
        out_max = min(out_max, int(quantize(6.0, params_c)))
    elif activation not in ("none", "relu"):
        raise ValueError(f"unsupported fused activation {activation!r}")

    lb = None
    if layer_bias is not None:
        lb = np.asarray(layer_bias, dtype=np.int64)
        if lb.shape != (q.shape[1],):
            raise ValueError("layer_bias must have one entry per output column")
    return QGemmPlan(
        q_weights=q,
        centered_weights=centered,
        bias_term=bias,
        col_sums=col,
        multiplier=requant_multiplier(params_a, params_b, params_c),
        z_out=params_c.zero_point,
        depth=n,
        z_in=za,
        z_weights=zb,
        out_min=out_min,
        out_max=out_max,
        layer_bias=lb,
    )


def _requantize(total: np.ndarray, plan: QGemmPlan) -> np.ndarray:
    out = plan.z_out + apply_multiplier(total, plan.multiplier)
    return np.clip(out, plan.out_min, plan.out_max).astype(np.int32)


def oaq_qgemm(
    q_a: np.ndarray,
    plan: QGemmPlan,
    cfg: AccumulatorConfig = AccumulatorConfig(),
    injector: Optional[Injector] = None,
    return_acc: bool = False,
):
    """``q_c = Z_c + P * (sum_j q_a * qhat_b + B)`` with the configured holder.

    Returns ``(q_c, report)``; with ``return_acc`` also the raw holder values.
    """
    q_a = np.asarray(q_a, dtype=np.int64)
    if q_a.ndim != 2 or q_a.shape[1] != plan.depth:
        raise ValueError(f"dimension mismatch: {q_a.shape} x ({plan.depth}, {plan.out_features})")
    _check_int8("q_a", q_a)
    out_shape = (q_a.shape[0], plan.out_features)
    if cfg.width == 32 and not cfg.count_events and injector is None and cfg.lanes == 1:
        acc = q_a @ plan.centered_weights
        report = OverflowReport(steps=plan.depth * out_shape[0] * out_shape[1])
    else:
        acc, report = accumulate_gemm(q_a, plan.centered_weights, cfg, injector)
    out = _requantize(acc + plan.bias_term + plan.layer_bias, plan)
    return (out, report, acc) if return_acc else (out, report)


# ---------------------------------------------------------------------------
# Convolution (NHWC)
# ---------------------------------------------------------------------------


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def conv_output_size(h: int, w: int, kernel, stride, padding) -> tuple[int, int]:
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    if oh < 1 or ow < 1:
        raise ValueError(f"kernel {kernel} does not fit input {h}x{w} with padding {padding}")
    return oh, ow


def pad_nhwc(x: np.ndarray, padding, value=0) -> np.ndarray:
    ph, pw = _pair(padding)
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (ph, ph), (pw, pw), (0, 0)), constant_values=value)


def im2col_patches(x: np.ndarray, kernel, stride=1, padding=0, pad_value=0) -> np.ndarray:
    """Patches of an NHWC tensor as ``(n, oh, ow, kh*kw, c)``, taps in (ky, kx) order."""
    if x.ndim != 4:
        raise ValueError("expected an NHWC tensor")
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    n, h, w, c = x.shape
    oh, ow = conv_output_size(h, w, kernel, stride, padding)
    xp = pad_nhwc(x, padding, pad_value)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(1, 2))
    win = win[:, : (oh - 1) * sh + 1 : sh, : (ow - 1) * sw + 1 : sw]
    # (n, oh, ow, c, kh, kw) -> (n, oh, ow, kh, kw, c)
    win = win.transpose(0, 1, 2, 4, 5, 3)
    return win.reshape(n, oh, ow, kh * kw, c)


def im2col(x: np.ndarray, kernel, stride=1, padding=0, pad_value=0) -> np.ndarray:
    """``(n*oh*ow, kh*kw*c)`` matrix whose columns follow HWIO weight order."""
    p = im2col_patches(x, kernel, stride, padding, pad_value)
    n, oh, ow, t, c = p.shape
    return p.reshape(n * oh * ow, t * c)


def _conv_direct_chunks(xp, kernel, stride, oh, ow, w, depthwise):
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    c = xp.shape[3]
    t = 0
    for ky in range(kh):
        for kx in range(kw):
            tap = xp[:, ky : ky + (oh - 1) * sh + 1 : sh, kx : kx + (ow - 1) * sw + 1 : sw, :]
            tap = tap.reshape(-1, c).astype(np.int64)
            if depthwise:
                yield (tap * w[t][None, :])[None]
                t += 1
            else:
                for ci in range(c):
                    yield (tap[:, ci, None] * w[t][None, :])[None]
                    t += 1


def _depthwise_chunks(patches: np.ndarray, w: np.ndarray):
    # patches (P, T, C), w (T, C)
    p, t, c = patches.shape
    step = _block(p, c)
    for t0 in range(0, t, step):
        t1 = min(t, t0 + step)
        yield patches[:, t0:t1, :].transpose(1, 0, 2).astype(np.int64) * w[t0:t1, None, :]


def conv_accumulate(
    q_input: np.ndarray,
    centered_weights: np.ndarray,
    z_in: int,
    kernel,
    stride=1,
    padding=0,
    cfg: AccumulatorConfig = AccumulatorConfig(),
    depthwise: bool = False,
    method: str = "im2col",
    injector: Optional[Injector] = None,
):
    """Raw holder contents of an NHWC convolution, shaped ``(n*oh*ow, c_out)``.

    Padding uses ``z_in`` so padded taps are exact zeros in the real domain.
    ``method="direct"`` walks the taps without building the patch matrix and
    must agree with ``"im2col"`` bit-for-bit.
    """
    x = np.asarray(q_input, dtype=np.int64)
    if x.ndim != 4:
        raise ValueError("q_input must be NHWC")
    _check_int8("q_input", x)
    wts = np.asarray(centered_weights, dtype=np.int64)
    kh, kw = _pair(kernel)
    n, h, w_, c = x.shape
    oh, ow = conv_output_size(h, w_, kernel, stride, padding)
    taps = kh * kw
    if depthwise:
        if wts.shape != (taps, c):
            raise ValueError(f"depthwise weights {wts.shape} do not match kernel {kernel} and {c} channels")
    elif wts.shape[0] != taps * c:
        raise ValueError(f"weight depth {wts.shape[0]} != kh*kw*c_in = {taps * c}")
    rows = n * oh * ow
    out_shape = (rows, wts.shape[1])
    if method == "direct":
        xp = pad_nhwc(x, padding, z_in)
        chunks = _conv_direct_chunks(xp, kernel, stride, oh, ow, wts, depthwise)
    elif method == "im2col":
        if depthwise:
            patches = im2col_patches(x, kernel, stride, padding, z_in).reshape(rows, taps, c)
            chunks = _depthwise_chunks(patches, wts)
        else:
            acc, report = accumulate_gemm(im2col(x, kernel, stride, padding, z_in), wts, cfg, injector)
            return acc, report, (n, oh, ow)
    else:
        raise ValueError(f"unknown method {method!r}")
    acc, report = accumulate(chunks, out_shape, cfg, injector)
    return acc, report, (n, oh, ow)


def oaq_conv2d(
    q_input: np.ndarray,
    plan: QGemmPlan,
    kernel,
    stride=1,
    padding=0,
    cfg: AccumulatorConfig = AccumulatorConfig(),
    depthwise: bool = False,
    method: str = "im2col",
    injector: Optional[Injector] = None,
):
    """Quantized NHWC convolution through a precomputed plan.

    ``plan`` holds weights as ``(kh*kw*c_in, c_out)`` for a standard
    convolution or ``(kh*kw, c)`` for depthwise. Report rows index flattened
    output pixels.
    """
    acc, report, (n, oh, ow) = conv_accumulate(
        q_input, plan.centered_weights, plan.z_in, kernel, stride, padding,
        cfg, depthwise, method, injector,
    )
    out = _requantize(acc + plan.bias_term + plan.layer_bias, plan)
    return out.reshape(n, oh, ow, plan.out_features), report
