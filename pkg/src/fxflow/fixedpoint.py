"""Parametric fixed-point arithmetic with explicit rounding/overflow policy.

A value is stored as a raw two's-complement integer together with a
FixedFormat describing where the binary point sits.  real value =
raw * 2**(-fractional_bits), always exact.  All arithmetic is computed
exactly in arbitrary-precision integers and then cast to the requested
output format, so results are bit-deterministic across platforms.

Scalar operations (FixedScalar) are the reference semantics; the *_array
helpers are vectorized equivalents used by the layer kernels and are
required to match the scalar path bit for bit.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

ROUND_TRUNCATE = "truncate"
ROUND_NEAREST_EVEN = "round_nearest_even"
OVERFLOW_SATURATE = "saturate"
OVERFLOW_WRAP = "wrap"

# Raw payloads are capped at 64 bits; array kernels fall back to exact
# Python-int (object dtype) arithmetic when int64 intermediates could
# overflow.
MAX_TOTAL_BITS = 64


class FixedPointError(ValueError):
    pass


@dataclass(frozen=True)
class FixedFormat:
    """Bit layout of a fixed-point number.

    integer_bits counts the bits left of the binary point and includes
    the sign bit when signed.  fractional_bits = total_bits - integer_bits.
    """

    total_bits: int
    integer_bits: int
    signed: bool = True
    rounding: str = ROUND_TRUNCATE
    overflow: str = OVERFLOW_SATURATE

    def __post_init__(self):
        if not (1 <= self.total_bits <= MAX_TOTAL_BITS):
            raise FixedPointError(f"total_bits must be in 1..{MAX_TOTAL_BITS}, got {self.total_bits}")
        if not (0 <= self.integer_bits <= self.total_bits):
            raise FixedPointError(
                f"integer_bits must be in 0..total_bits, got {self.integer_bits}/{self.total_bits}")
        if self.rounding not in (ROUND_TRUNCATE, ROUND_NEAREST_EVEN):
            raise FixedPointError(f"unknown rounding mode {self.rounding!r}")
        if self.overflow not in (OVERFLOW_SATURATE, OVERFLOW_WRAP):
            raise FixedPointError(f"unknown overflow mode {self.overflow!r}")

    @property
    def fractional_bits(self) -> int:
        return self.total_bits - self.integer_bits

    @property
    def raw_min(self) -> int:
        return -(1 << (self.total_bits - 1)) if self.signed else 0

    @property
    def raw_max(self) -> int:
        return (1 << (self.total_bits - 1)) - 1 if self.signed else (1 << self.total_bits) - 1

    def step(self) -> float:
        return math.ldexp(1.0, -self.fractional_bits)

    def min(self) -> float:
        return math.ldexp(self.raw_min, -self.fractional_bits)

    def max(self) -> float:
        return math.ldexp(self.raw_max, -self.fractional_bits)

    def with_policy(self, rounding: str | None = None, overflow: str | None = None) -> "FixedFormat":
        return FixedFormat(self.total_bits, self.integer_bits, self.signed,
                           rounding if rounding is not None else self.rounding,
                           overflow if overflow is not None else self.overflow)

    def __str__(self) -> str:
        name = "fixed" if self.signed else "ufixed"
        return f"{name}<{self.total_bits},{self.integer_bits}>"


_FORMAT_RE = re.compile(r"^\s*(u?fixed)\s*<\s*(\d+)\s*,\s*(\d+)\s*>\s*$")


def parse_format(text: str, rounding: str = ROUND_TRUNCATE,
                 overflow: str = OVERFLOW_SATURATE) -> FixedFormat:
    """Parse ``fixed<T,I>`` (signed) / ``ufixed<T,I>`` (unsigned) syntax."""
    m = _FORMAT_RE.match(text)
    if not m:
        raise FixedPointError(f"bad format string {text!r}, expected fixed<T,I> or ufixed<T,I>")
    kind, total, integer = m.group(1), int(m.group(2)), int(m.group(3))
    return FixedFormat(total, integer, signed=(kind == "fixed"),
                       rounding=rounding, overflow=overflow)


@dataclass(frozen=True)
class FixedScalar:
    raw: int
    format: FixedFormat

    def __post_init__(self):
        if not (self.format.raw_min <= self.raw <= self.format.raw_max):
            raise FixedPointError(
                f"raw {self.raw} out of range for {self.format}")

    def value(self) -> float:
        return math.ldexp(self.raw, -self.format.fractional_bits)

    def __float__(self) -> float:
        return self.value()


def _round_shift(raw: int, shift: int, rounding: str) -> int:
    """Drop `shift` low bits of an exact integer with the given rounding.

    Truncation rounds toward negative infinity (Python floor shift);
    round_nearest_even resolves exact halves to the even result.
    """
    if shift <= 0:
        return raw << (-shift)
    base = raw >> shift
    if rounding == ROUND_TRUNCATE:
        return base
    rem = raw - (base << shift)
    half = 1 << (shift - 1)
    if rem > half or (rem == half and (base & 1)):
        return base + 1
    return base


def _apply_overflow(q: int, f: FixedFormat) -> int:
    if f.raw_min <= q <= f.raw_max:
        return q
    if f.overflow == OVERFLOW_SATURATE:
        return f.raw_min if q < f.raw_min else f.raw_max
    span = 1 << f.total_bits
    q %= span
    if f.signed and q > f.raw_max:
        q -= span
    return q


def quantize(x: float, f: FixedFormat) -> FixedScalar:
    """Round a real number onto f's grid under f's rounding/overflow policy."""
    if not math.isfinite(x):
        raise FixedPointError("non-finite input")
    # Fraction(float) is exact, so rounding decisions never see FP noise.
    scaled = Fraction(x) * (1 << f.fractional_bits)
    base = math.floor(scaled)
    if f.rounding == ROUND_TRUNCATE:
        q = base
    else:
        rem = scaled - base
        if rem > Fraction(1, 2) or (rem == Fraction(1, 2) and (base & 1)):
            q = base + 1
        else:
            q = base
    return FixedScalar(_apply_overflow(q, f), f)


def dequantize(v: FixedScalar) -> float:
    return v.value()


def requantize(raw: int, src_frac: int, out: FixedFormat) -> int:
    """Re-scale an exact integer at src_frac fractional bits into `out`."""
    q = _round_shift(raw, src_frac - out.fractional_bits, out.rounding)
    return _apply_overflow(q, out)


def fx_add(a: FixedScalar, b: FixedScalar, out: FixedFormat) -> FixedScalar:
    fa, fb = a.format.fractional_bits, b.format.fractional_bits
    f = max(fa, fb)
    total = (a.raw << (f - fa)) + (b.raw << (f - fb))
    return FixedScalar(requantize(total, f, out), out)


def fx_sub(a: FixedScalar, b: FixedScalar, out: FixedFormat) -> FixedScalar:
    fa, fb = a.format.fractional_bits, b.format.fractional_bits
    f = max(fa, fb)
    total = (a.raw << (f - fa)) - (b.raw << (f - fb))
    return FixedScalar(requantize(total, f, out), out)


def fx_mul(a: FixedScalar, b: FixedScalar, out: FixedFormat) -> FixedScalar:
    prod = a.raw * b.raw  # exact, arbitrary precision
    return FixedScalar(requantize(prod, a.format.fractional_bits + b.format.fractional_bits, out), out)


def accumulate(terms: Sequence[FixedScalar] | Iterable[FixedScalar], acc: FixedFormat) -> FixedScalar:
    """Left-to-right sum entirely in the accumulator format.

    Each term is cast into `acc` first, then added one at a time with
    `acc`'s overflow policy applied at every step, so the result is
    reproducible regardless of how the terms were produced.
    """
    running = 0
    af = acc.fractional_bits
    for t in terms:
        if t.format.integer_bits > acc.integer_bits:
            raise FixedPointError(
                f"accumulator {acc} narrower than term format {t.format}")
        cast = requantize(t.raw, t.format.fractional_bits, acc)
        running = _apply_overflow(running + cast, acc)
    return FixedScalar(running, acc)


# ---------------------------------------------------------------------------
# Tensor container and vectorized helpers
# ---------------------------------------------------------------------------

@dataclass
class QTensor:
    """Flat row-major integer payload plus its fixed-point format."""

    shape: tuple[int, ...]
    raw: np.ndarray
    format: FixedFormat

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        n = 1
        for s in self.shape:
            n *= s
        if self.raw.size != n:
            raise FixedPointError(f"raw length {self.raw.size} != product of shape {self.shape}")
        if self.raw.size:
            lo = self.raw.min() if self.raw.dtype == object else int(self.raw.min())
            hi = self.raw.max() if self.raw.dtype == object else int(self.raw.max())
            if lo < self.format.raw_min or hi > self.format.raw_max:
                raise FixedPointError(
                    f"raw payload [{lo}, {hi}] out of range for {self.format}")

    @property
    def mat(self) -> np.ndarray:
        return self.raw.reshape(self.shape)

    def to_floats(self) -> np.ndarray:
        return dequantize_array(self.raw, self.format).reshape(self.shape)

    def scalar(self, flat_index: int) -> FixedScalar:
        return FixedScalar(int(self.raw[flat_index]), self.format)

    def bit_equal(self, other: "QTensor") -> bool:
        return (self.shape == other.shape and self.format == other.format
                and bool(np.array_equal(self.raw, other.raw)))


def _needs_object(max_bits: int) -> bool:
    # int64 holds |v| < 2**63; keep a safety margin for shifts/sums
    return max_bits > 62


def quantize_array(x: np.ndarray, f: FixedFormat) -> np.ndarray:
    """Vectorized quantize; bit-identical to the scalar `quantize`."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise FixedPointError("non-finite input")
    scaled = np.ldexp(x, f.fractional_bits)
    # elements too large for exact float->int64 conversion go through the
    # exact scalar path (rare: only near-overflow magnitudes)
    big = np.abs(scaled) >= 2.0 ** 53
    if f.rounding == ROUND_TRUNCATE:
        q = np.floor(scaled)
    else:
        q = np.rint(scaled)
    q = np.clip(q, -(2.0 ** 62), 2.0 ** 62).astype(np.int64)
    if f.overflow == OVERFLOW_SATURATE:
        q = np.clip(q, f.raw_min, f.raw_max)
    else:
        span = 1 << f.total_bits
        q = np.mod(q, span)
        if f.signed:
            q = np.where(q > f.raw_max, q - span, q)
    if big.any():
        flat = q.reshape(-1)
        xf = x.reshape(-1)
        for i in np.nonzero(big.reshape(-1))[0]:
            flat[i] = quantize(float(xf[i]), f).raw
        q = flat.reshape(x.shape)
    return q


def dequantize_array(raw: np.ndarray, f: FixedFormat) -> np.ndarray:
    return np.ldexp(np.asarray(raw, dtype=np.float64), -f.fractional_bits)


def requantize_array(raw: np.ndarray, src_frac: int, out: FixedFormat) -> np.ndarray:
    """Vectorized `requantize` over an int64 or object array."""
    shift = src_frac - out.fractional_bits
    if shift <= 0:
        if raw.dtype == object:
            q = raw * (1 << (-shift))
        else:
            q = raw * np.int64(1 << (-shift))
    else:
        div = (1 << shift) if raw.dtype == object else np.int64(1 << shift)
        base = np.floor_divide(raw, div)
        if out.rounding == ROUND_TRUNCATE:
            q = base
        else:
            rem = raw - base * div
            half = div >> 1
            up = (rem > half) | ((rem == half) & ((base & 1) == 1))
            q = base + np.where(up, 1, 0)
    if out.overflow == OVERFLOW_SATURATE:
        if q.dtype == object:
            q = np.array([min(max(int(v), out.raw_min), out.raw_max) for v in q.reshape(-1)],
                         dtype=object).reshape(q.shape)
        else:
            q = np.clip(q, out.raw_min, out.raw_max)
    else:
        span = 1 << out.total_bits
        q = np.mod(q, span)
        if out.signed:
            q = np.where(q > out.raw_max, q - span, q)
    if q.dtype != object:
        q = q.astype(np.int64)
    return q


def saturating_reduce(terms: np.ndarray, acc: FixedFormat) -> np.ndarray:
    """Sum `terms` (already in acc format) along the last axis with acc's
    overflow policy applied at every partial sum, in index order.

    For a wrapping accumulator the per-step wrap equals one final wrap
    (two's-complement addition is associative), so the fast path is exact.
    With saturation a plain sum is only valid when no partial sum leaves
    the representable range; violating positions are recomputed serially.
    """
    if terms.dtype == object:
        work = terms
    else:
        # headroom check: partial sums of int64 values must not overflow
        n = terms.shape[-1] if terms.ndim else 1
        if _needs_object(acc.total_bits - 1 + max(1, n).bit_length()):
            work = terms.astype(object)
        else:
            work = terms
    if acc.overflow == OVERFLOW_WRAP:
        total = work.sum(axis=-1)
        span = 1 << acc.total_bits
        total = np.mod(total, span)
        if acc.signed:
            total = np.where(total > acc.raw_max, total - span, total)
        if isinstance(total, np.ndarray) and total.dtype != object:
            total = total.astype(np.int64)
        return total
    cs = np.cumsum(work, axis=-1)
    bad = (cs > acc.raw_max) | (cs < acc.raw_min)
    total = cs[..., -1] if cs.ndim else cs
    if not bad.any():
        if isinstance(total, np.ndarray) and total.dtype != object:
            total = total.astype(np.int64)
        return np.asarray(total)
    # slow path: clamp at every step where any intermediate escaped range
    total = np.asarray(total).copy()
    flat_terms = work.reshape(-1, work.shape[-1])
    flat_bad = bad.reshape(-1, work.shape[-1]).any(axis=-1)
    flat_total = total.reshape(-1)
    for i in np.nonzero(flat_bad)[0]:
        running = 0
        for t in flat_terms[i]:
            running = _apply_overflow(running + int(t), acc)
        flat_total[i] = running
    if flat_total.dtype != object:
        flat_total = flat_total.astype(np.int64)
    return flat_total.reshape(total.shape)


def add_arrays(a_raw: np.ndarray, a_fmt: FixedFormat,
               b_raw: np.ndarray, b_fmt: FixedFormat,
               out: FixedFormat) -> np.ndarray:
    fa, fb = a_fmt.fractional_bits, b_fmt.fractional_bits
    f = max(fa, fb)
    hi = max(a_fmt.total_bits + (f - fa), b_fmt.total_bits + (f - fb)) + 1
    if _needs_object(hi) and a_raw.dtype != object:
        a_raw = a_raw.astype(object)
        b_raw = b_raw.astype(object)
    if a_raw.dtype == object:
        total = a_raw * (1 << (f - fa)) + b_raw * (1 << (f - fb))
    else:
        total = a_raw * np.int64(1 << (f - fa)) + b_raw * np.int64(1 << (f - fb))
    return requantize_array(total, f, out)


def qmatmul(a: QTensor, b: QTensor, acc: FixedFormat, out: FixedFormat,
            bias: QTensor | None = None) -> QTensor:
    """Fixed-point matrix product [n,k] @ [k,m] -> [n,m].

    Every elementwise product is computed exactly, cast into the
    accumulator format, summed left-to-right over k in that format, the
    optional bias is added as one more accumulator step, and the total is
    cast to `out`.  Matches a nested fx_mul/accumulate loop bit for bit.
    """
    n, k = a.shape
    k2, m = b.shape
    if k != k2:
        raise FixedPointError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    prod_frac = a.format.fractional_bits + b.format.fractional_bits
    prod_bits = a.format.total_bits + b.format.total_bits
    shift_up = max(0, acc.fractional_bits - prod_frac)
    am = a.mat
    bm = b.mat
    if _needs_object(prod_bits + shift_up) and am.dtype != object:
        am = am.astype(object)
        bm = bm.astype(object)
    # terms[n, m, k]: product of a[n, k] with b[k, m], reduction axis last
    terms = am[:, None, :] * bm.T[None, :, :]
    terms = requantize_array(terms, prod_frac, acc)
    total = saturating_reduce(terms, acc)
    if bias is not None:
        bias_acc = requantize_array(bias.mat, bias.format.fractional_bits, acc)
        total = saturating_reduce(
            np.stack([total, np.broadcast_to(bias_acc, total.shape)], axis=-1), acc)
    raw = requantize_array(total, acc.fractional_bits, out)
    return QTensor((n, m), raw.reshape(-1), out)


def qtensor_from_floats(x: np.ndarray, f: FixedFormat) -> QTensor:
    x = np.asarray(x, dtype=np.float64)
    return QTensor(x.shape, quantize_array(x, f).reshape(-1), f)
