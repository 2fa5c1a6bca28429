"""Affine fixed-point representation with a range-mapping factor.

Real values map to integers via ``r = S' * (q - Z)`` where ``S' = alpha * S``.
Raising ``alpha`` above 1 shrinks the usable integer range to
``[floor(q_lo / alpha), floor(q_hi / alpha)]`` while the real range stays
roughly fixed, trading resolution for accumulator headroom.

Real tensors use float32 semantics; quantized tensors are returned as int32
arrays whose values lie in the (at most 8-bit) effective range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

MIN_BITS = 2
MAX_BITS = 8
DEGENERATE_WIDTH = 1e-5

INT32_MIN = -(1 << 31)
INT32_MAX = (1 << 31) - 1


def signed_range(bits: int) -> tuple[int, int]:
    return -(1 << (bits - 1)), (1 << (bits - 1)) - 1


def effective_range(bits: int, alpha: float) -> tuple[int, int]:
    """Integer range left after narrowing a signed ``bits`` range by ``alpha``."""
    lo, hi = signed_range(bits)
    return math.floor(lo / alpha), math.floor(hi / alpha)


def round_half_away(x):
    """Round to nearest integer, ties away from zero.

    Works for scalars and arrays without the ``floor(|x| + 0.5)`` trick, which
    misrounds the largest float below 0.5.
    """
    x = np.asarray(x)
    mag = np.abs(x)
    whole = np.floor(mag)
    up = (mag - whole) >= 0.5
    return np.copysign(whole + up, x)


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int
    bits: int
    alpha: float
    r_min: float
    r_max: float
    symmetric: bool = False
    degenerate: bool = False

    def __post_init__(self):
        if not MIN_BITS <= self.bits <= MAX_BITS:
            raise ValueError(f"bits must be in [{MIN_BITS}, {MAX_BITS}], got {self.bits}")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not self.alpha >= 1.0:
            raise ValueError(f"alpha must be >= 1, got {self.alpha}")
        if not self.r_min <= 0.0 <= self.r_max:
            raise ValueError(f"range [{self.r_min}, {self.r_max}] must contain 0")
        if self.symmetric and self.zero_point != 0:
            raise ValueError("symmetric params require zero_point == 0")
        lo, hi = self.qrange
        if not lo <= self.zero_point <= hi:
            raise ValueError(f"zero_point {self.zero_point} outside [{lo}, {hi}]")

    @property
    def step(self) -> float:
        """Effective scale ``alpha * S`` rounded to float32."""
        return float(np.float32(self.alpha * self.scale))

    @property
    def qrange(self) -> tuple[int, int]:
        return effective_range(self.bits, self.alpha)

    @property
    def qmin(self) -> int:
        return self.qrange[0]

    @property
    def qmax(self) -> int:
        return self.qrange[1]

    @property
    def effective_bits(self) -> float:
        return self.bits - math.log2(self.alpha)

    @property
    def real_range(self) -> tuple[float, float]:
        """Real interval that quantizes without clamping."""
        s = self.step
        return s * (self.qmin - self.zero_point), s * (self.qmax - self.zero_point)

    def to_dict(self) -> dict:
        return {
            "scale": self.scale,
            "zero_point": self.zero_point,
            "bits": self.bits,
            "alpha": self.alpha,
            "r_min": self.r_min,
            "r_max": self.r_max,
            "symmetric": self.symmetric,
            "degenerate": self.degenerate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QuantParams":
        return cls(
            scale=float(d["scale"]),
            zero_point=int(d["zero_point"]),
            bits=int(d["bits"]),
            alpha=float(d["alpha"]),
            r_min=float(d["r_min"]),
            r_max=float(d["r_max"]),
            symmetric=bool(d.get("symmetric", False)),
            degenerate=bool(d.get("degenerate", False)),
        )


def derive_scale(
    r_min: float,
    r_max: float,
    bits: int = 8,
    alpha: float = 1.0,
    symmetric: bool = False,
) -> QuantParams:
    """Build quantization parameters for the real range ``[r_min, r_max]``.

    The range is only ever widened: first to contain 0.0, then (for
    ``symmetric``) to be centred on 0.0. The base scale is
    ``(r_max - r_min) / (2**bits - 1)`` and the zero point is the rounded
    integer that places ``r_min`` at the bottom of the effective range.
    A range narrower than 1e-5 (including zero width) is replaced by one of
    width 1e-5 around its midpoint and flagged ``degenerate``.
    """
    if not MIN_BITS <= bits <= MAX_BITS:
        raise ValueError(f"bits must be in [{MIN_BITS}, {MAX_BITS}], got {bits}")
    if not alpha >= 1.0:
        raise ValueError(f"alpha must be >= 1, got {alpha}")
    r_min, r_max = float(r_min), float(r_max)
    if not (math.isfinite(r_min) and math.isfinite(r_max)):
        raise ValueError(f"non-finite range [{r_min}, {r_max}]")
    if r_max < r_min:
        raise ValueError(f"r_max ({r_max}) < r_min ({r_min})")

    # ranges narrower than the epsilon would underflow the float32 step
    degenerate = r_max - r_min < DEGENERATE_WIDTH
    if degenerate:
        center = (r_min + r_max) / 2
        r_min, r_max = center - DEGENERATE_WIDTH / 2, center + DEGENERATE_WIDTH / 2

    r_min, r_max = min(r_min, 0.0), max(r_max, 0.0)
    if symmetric:
        m = max(-r_min, r_max)
        r_min, r_max = -m, m

    scale = (r_max - r_min) / ((1 << bits) - 1)
    lo, hi = effective_range(bits, alpha)
    if symmetric:
        zero_point = 0
    else:
        step = float(np.float32(alpha * scale))
        zero_point = int(round_half_away(lo - r_min / step))
        zero_point = min(max(zero_point, lo), hi)
    return QuantParams(
        scale=scale,
        zero_point=zero_point,
        bits=bits,
        alpha=float(alpha),
        r_min=r_min,
        r_max=r_max,
        symmetric=symmetric,
        degenerate=degenerate,
    )


def quantize(t, p: QuantParams) -> np.ndarray:
    """``clamp(round(r / S') + Z)`` evaluated in float32."""
    r = np.asarray(t, dtype=np.float32)
    q = round_half_away(r / np.float32(p.step))
    q = np.clip(q + p.zero_point, p.qmin, p.qmax)
    return q.astype(np.int32)


def dequantize(q, p: QuantParams) -> np.ndarray:
    q = np.asarray(q, dtype=np.int64)
    return (np.float32(p.step) * (q - p.zero_point).astype(np.float32)).astype(np.float32)


@dataclass(frozen=True)
class FixedPointMultiplier:
    """Real multiplier stored as ``mantissa * 2**-31 * 2**-right_shift``."""

    mantissa: int
    right_shift: int

    @property
    def value(self) -> float:
        return math.ldexp(self.mantissa, -31 - self.right_shift)


class InvalidMultiplierError(ValueError):
    pass


def compile_multiplier(P: float) -> FixedPointMultiplier:
    """Encode ``0 < P < 1`` as a normalized Q31 mantissa and a right shift."""
    P = float(P)
    if not (0.0 < P < 1.0) or not math.isfinite(P):
        raise InvalidMultiplierError(f"multiplier must satisfy 0 < P < 1, got {P}")
    frac, exp = math.frexp(P)  # P = frac * 2**exp, frac in [0.5, 1)
    mantissa = int(round_half_away(frac * (1 << 31)))
    if mantissa == 1 << 31:
        mantissa //= 2
        exp += 1
    if exp > 0:
        # P rounds up to 1.0 within Q31 precision
        mantissa, exp = (1 << 31) - 1, 0
    return FixedPointMultiplier(mantissa=mantissa, right_shift=-exp)


def _rounding_shift(prod, shift: int):
    """``round(prod / 2**shift)`` with ties away from zero, integer-only."""
    if shift == 0:
        return prod
    if shift >= 63:
        return np.zeros_like(prod)
    mag = np.abs(prod)
    res = (mag + (np.int64(1) << np.int64(shift - 1))) >> np.int64(shift)
    return np.where(prod < 0, -res, res)


def apply_multiplier(x, m: FixedPointMultiplier):
    """``round(x * P)`` for int32 ``x`` via a 64-bit product and a rounding shift."""
    scalar = np.isscalar(x)
    x = np.asarray(x, dtype=np.int64)
    if x.size and (x.min() < INT32_MIN or x.max() > INT32_MAX):
        raise OverflowError("apply_multiplier input leaves the int32 range")
    out = _rounding_shift(x * np.int64(m.mantissa), 31 + m.right_shift)
    return int(out) if scalar else out


def rescale(x, ratio: float):
    """Integer rescale by any positive ``ratio``.

    Ratios >= 1 are split into a left shift and a sub-unit multiplier; used by
    the elementwise integer ops (add, concat, standalone activations).
    """
    if not ratio > 0:
        raise InvalidMultiplierError(f"rescale ratio must be positive, got {ratio}")
    x = np.asarray(x, dtype=np.int64)
    frac, exp = math.frexp(ratio)
    left = max(exp, 0)
    m = compile_multiplier(math.ldexp(frac, exp - left))
    return apply_multiplier(x << np.int64(left), m)
