"""Precomputed lookup tables for exp, reciprocal and inverse square root.

Tables sample the target function at cell midpoints over a fixed input
range; lookups index by the cell containing the input and clamp anything
outside the range to the boundary entries, bumping a per-table saturation
counter for diagnostics.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .fixedpoint import FixedFormat, FixedScalar, quantize_array

KINDS = ("exp", "reciprocal", "inv_sqrt")

_FUNCS = {
    "exp": math.exp,
    "reciprocal": lambda x: 1.0 / x,
    "inv_sqrt": lambda x: 1.0 / math.sqrt(x),
}

# |f'| on a cell [a, b]; all three kinds have monotone |f'|, so the max
# sits at one endpoint.
_DERIV_MAX = {
    "exp": lambda a, b: math.exp(b),
    "reciprocal": lambda a, b: 1.0 / (a * a),
    "inv_sqrt": lambda a, b: 0.5 * a ** -1.5,
}


class LutDomainError(ValueError):
    pass


@dataclass(frozen=True)
class LutSpec:
    kind: str
    table_size: int
    input_lo: float
    input_hi: float
    entry_format: FixedFormat

    def __post_init__(self):
        if self.kind not in KINDS:
            raise LutDomainError(f"unknown LUT kind {self.kind!r}")
        if self.table_size < 2 or self.table_size & (self.table_size - 1):
            raise LutDomainError(f"table_size must be a power of two >= 2, got {self.table_size}")
        if not (self.input_lo < self.input_hi):
            raise LutDomainError("invalid LUT domain")
        if self.kind in ("reciprocal", "inv_sqrt") and self.input_lo <= 0:
            raise LutDomainError("invalid LUT domain")

    @property
    def cell_width(self) -> float:
        return (self.input_hi - self.input_lo) / self.table_size


@dataclass
class LutTable:
    spec: LutSpec
    entries_raw: np.ndarray
    saturation_count: int = 0  # confined to one simulation run; not thread safe

    def entry(self, i: int) -> FixedScalar:
        return FixedScalar(int(self.entries_raw[i]), self.spec.entry_format)

    def entry_values(self) -> np.ndarray:
        f = self.spec.entry_format
        return np.ldexp(self.entries_raw.astype(np.float64), -f.fractional_bits)

    def midpoints(self) -> np.ndarray:
        s = self.spec
        return s.input_lo + (np.arange(s.table_size) + 0.5) * s.cell_width

    def error_bound(self) -> float:
        """Worst-case |table(x) - f(x)| over the domain: the steepest cell's
        slope times the cell width, plus one entry quantization step."""
        s = self.spec
        deriv = _DERIV_MAX[s.kind]
        worst = 0.0
        for i in range(s.table_size):
            a = s.input_lo + i * s.cell_width
            worst = max(worst, deriv(max(a, 1e-300), a + s.cell_width))
        return worst * s.cell_width + s.entry_format.step()

    def local_error_bound(self, x: float) -> float:
        """|table(x) - f(x)| bound for the specific cell containing x."""
        s = self.spec
        i = min(max(int(math.floor((x - s.input_lo) / s.cell_width)), 0), s.table_size - 1)
        a = s.input_lo + i * s.cell_width
        return _DERIV_MAX[s.kind](max(a, 1e-300), a + s.cell_width) * s.cell_width \
            + s.entry_format.step()


def build_lut(spec: LutSpec) -> LutTable:
    fn = _FUNCS[spec.kind]
    mids = spec.input_lo + (np.arange(spec.table_size) + 0.5) * spec.cell_width
    vals = np.array([fn(float(m)) for m in mids])
    raw = quantize_array(vals, spec.entry_format)
    return LutTable(spec, raw)


def lookup(table: LutTable, x: FixedScalar) -> FixedScalar:
    s = table.spec
    xr = x.value()
    idx = math.floor((xr - s.input_lo) / s.cell_width)
    if idx < 0 or xr > s.input_hi:
        table.saturation_count += 1
    idx = min(max(idx, 0), s.table_size - 1)
    return table.entry(idx)


def lookup_array(table: LutTable, raw: np.ndarray, in_format: FixedFormat) -> np.ndarray:
    """Vectorized lookup over raw values in `in_format`; returns entry raws."""
    s = table.spec
    xs = np.ldexp(np.asarray(raw, dtype=np.float64), -in_format.fractional_bits)
    idx = np.floor((xs - s.input_lo) / s.cell_width)
    table.saturation_count += int(((idx < 0) | (xs > s.input_hi)).sum())
    idx = np.clip(idx, 0, s.table_size - 1).astype(np.int64)
    return table.entries_raw[idx]


def dump_csv(table: LutTable) -> str:
    lines = ["index,input_midpoint,entry_value"]
    vals = table.entry_values()
    for i, (m, v) in enumerate(zip(table.midpoints(), vals)):
        lines.append(f"{i},{float(m)!r},{float(v)!r}")
    return "\n".join(lines) + "\n"
