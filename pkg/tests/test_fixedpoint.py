"""Fixed-point core: formats, policies, scalar ops, and the vectorized
paths that must match them bit for bit."""
import math
from fractions import Fraction

import numpy as np
import pytest

from fxflow.fixedpoint import (
    OVERFLOW_SATURATE,
    OVERFLOW_WRAP,
    ROUND_NEAREST_EVEN,
    ROUND_TRUNCATE,
    FixedFormat,
    FixedPointError,
    FixedScalar,
    QTensor,
    accumulate,
    add_arrays,
    dequantize,
    fx_add,
    fx_mul,
    fx_sub,
    parse_format,
    qmatmul,
    qtensor_from_floats,
    quantize,
    quantize_array,
    requantize,
    requantize_array,
    saturating_reduce,
)

U74 = parse_format("ufixed<7,4>")


class TestFormat:
    def test_range_example(self):
        assert U74.min() == 0.0
        assert U74.max() == 15.875
        assert U74.step() == 0.125

    def test_parse_render(self):
        assert str(parse_format("fixed<16,6>")) == "fixed<16,6>"
        assert parse_format("ufixed<7,4>").signed is False
        with pytest.raises(FixedPointError):
            parse_format("float<16,6>")
        with pytest.raises(FixedPointError):
            parse_format("fixed<16>")

    def test_invariants(self):
        with pytest.raises(FixedPointError):
            FixedFormat(0, 0)
        with pytest.raises(FixedPointError):
            FixedFormat(8, 9)
        with pytest.raises(FixedPointError):
            FixedFormat(70, 8)
        f = FixedFormat(8, 0, signed=False)  # pure fraction is allowed
        assert f.max() == (2 ** 8 - 1) / 2 ** 8

    def test_extremes_exact(self):
        f = FixedFormat(12, 5, signed=True)
        assert quantize(f.max(), f).raw == f.raw_max
        assert quantize(f.min(), f).raw == f.raw_min


class TestQuantize:
    def test_paper_endpoint(self):
        v = quantize(15.875, U74)
        assert v.raw == 127 and v.value() == 15.875

    def test_zero(self):
        for f in (U74, FixedFormat(16, 6), FixedFormat(9, 2, signed=False)):
            assert quantize(0.0, f).value() == 0.0

    def test_truncation(self):
        assert quantize(0.3, U74).value() == 0.25  # 0.3/0.125 = 2.4 -> raw 2

    def test_saturation(self):
        assert quantize(20.0, U74).value() == 15.875
        assert quantize(-1.0, U74).value() == 0.0

    def test_wrap(self):
        f = FixedFormat(7, 4, signed=False, overflow=OVERFLOW_WRAP)
        assert quantize(16.0, f).raw == 0  # 128 mod 128
        s = FixedFormat(8, 4, overflow=OVERFLOW_WRAP)
        assert quantize(8.0, s).value() == -8.0  # two's complement wrap

    def test_non_finite(self):
        for bad in (float("nan"), float("inf"), -float("inf")):
            with pytest.raises(FixedPointError, match="non-finite"):
                quantize(bad, U74)

    def test_round_nearest_even(self):
        f = FixedFormat(8, 4, rounding=ROUND_NEAREST_EVEN)
        assert quantize(0.15625, f).raw == 2  # 2.5 -> even 2
        assert quantize(0.21875, f).raw == 4  # 3.5 -> even 4
        assert quantize(-0.15625, f).raw == -2  # -2.5 -> even -2

    def test_error_bound(self):
        rng = np.random.default_rng(0)
        f_tr = FixedFormat(12, 4)
        f_ne = FixedFormat(12, 4, rounding=ROUND_NEAREST_EVEN)
        for x in rng.uniform(f_tr.min(), f_tr.max(), 300):
            x = float(x)
            assert abs(quantize(x, f_tr).value() - x) < f_tr.step()
            assert abs(quantize(x, f_ne).value() - x) <= f_ne.step() / 2

    def test_saturate_monotone(self):
        rng = np.random.default_rng(1)
        xs = np.sort(rng.uniform(-40, 40, 200))
        f = FixedFormat(10, 5)
        vals = [quantize(float(x), f).value() for x in xs]
        assert all(a <= b for a, b in zip(vals, vals[1:]))


class TestDequantize:
    def test_examples(self):
        assert dequantize(FixedScalar(127, U74)) == 15.875
        assert dequantize(FixedScalar(0, U74)) == 0.0
        assert dequantize(FixedScalar(1, U74)) == 0.125

    @pytest.mark.parametrize("fmt", [
        FixedFormat(7, 4, signed=False),
        FixedFormat(8, 3),
        FixedFormat(12, 0, signed=False),
        FixedFormat(12, 12),
        FixedFormat(10, 5, rounding=ROUND_NEAREST_EVEN),
    ])
    def test_roundtrip_exhaustive(self, fmt):
        for raw in range(fmt.raw_min, fmt.raw_max + 1):
            v = FixedScalar(raw, fmt)
            assert quantize(dequantize(v), fmt).raw == raw


class TestArithmetic:
    def test_mul_exact(self):
        f = FixedFormat(12, 4, signed=False)  # 8 fractional bits
        a = quantize(0.125, f)
        out = fx_mul(a, a, f)
        assert out.value() == 0.015625

    def test_additive_identity(self):
        f = FixedFormat(16, 6)
        a = quantize(1.625, f)
        z = quantize(0.0, f)
        assert fx_add(a, z, f).raw == a.raw

    def test_add_saturates(self):
        a = quantize(15.875, U74)
        b = quantize(0.125, U74)
        assert fx_add(a, b, U74).value() == 15.875

    def test_against_rational_oracle(self):
        # exact-rational reimplementation of round+policy, independent code
        def oracle(x: Fraction, out: FixedFormat) -> int:
            scaled = x * (1 << out.fractional_bits)
            base = math.floor(scaled)
            if out.rounding == ROUND_TRUNCATE:
                q = base
            else:
                rem = scaled - base
                q = base + 1 if (rem > Fraction(1, 2)
                                 or (rem == Fraction(1, 2) and base % 2)) else base
            if out.raw_min <= q <= out.raw_max:
                return q
            if out.overflow == OVERFLOW_SATURATE:
                return out.raw_min if q < out.raw_min else out.raw_max
            span = 1 << out.total_bits
            q %= span
            return q - span if (out.signed and q > out.raw_max) else q

        rng = np.random.default_rng(7)
        formats = [FixedFormat(16, 6), FixedFormat(10, 3, signed=False),
                   FixedFormat(14, 7, rounding=ROUND_NEAREST_EVEN),
                   FixedFormat(12, 6, overflow=OVERFLOW_WRAP),
                   FixedFormat(33, 12)]
        for _ in range(400):
            fa, fb, fo = (formats[i] for i in rng.integers(0, len(formats), 3))
            a = FixedScalar(int(rng.integers(fa.raw_min, fa.raw_max + 1)), fa)
            b = FixedScalar(int(rng.integers(fb.raw_min, fb.raw_max + 1)), fb)
            va = Fraction(a.raw, 1 << fa.fractional_bits)
            vb = Fraction(b.raw, 1 << fb.fractional_bits)
            assert fx_mul(a, b, fo).raw == oracle(va * vb, fo)
            assert fx_add(a, b, fo).raw == oracle(va + vb, fo)
            assert fx_sub(a, b, fo).raw == oracle(va - vb, fo)


class TestAccumulate:
    def test_headroom(self):
        acc = FixedFormat(13, 10)  # 10 integer bits including sign
        one = quantize(1.0, FixedFormat(8, 4))
        assert accumulate([one] * 511, acc).value() == 511.0
        assert accumulate([one] * 512, acc).value() == acc.max()  # saturates

    def test_empty(self):
        acc = FixedFormat(13, 10)
        assert accumulate([], acc).value() == 0.0

    def test_dyadic_sum(self):
        acc = FixedFormat(16, 10)
        v = quantize(0.125, FixedFormat(8, 4))
        assert accumulate([v] * 8, acc).value() == 1.0

    def test_narrow_accumulator_rejected(self):
        acc = FixedFormat(8, 4)
        t = quantize(1.0, FixedFormat(12, 6))
        with pytest.raises(FixedPointError):
            accumulate([t], acc)


class TestVectorized:
    def test_quantize_array_matches_scalar(self):
        rng = np.random.default_rng(3)
        xs = np.concatenate([rng.uniform(-100, 100, 500),
                             [0.0, 15.875, -16.0, 1e9, -1e9]])
        for fmt in [U74, FixedFormat(16, 6), FixedFormat(8, 4, overflow=OVERFLOW_WRAP),
                    FixedFormat(12, 5, rounding=ROUND_NEAREST_EVEN)]:
            got = quantize_array(xs, fmt)
            want = np.array([quantize(float(x), fmt).raw for x in xs])
            assert np.array_equal(got, want), fmt

    def test_requantize_array_matches_scalar(self):
        rng = np.random.default_rng(4)
        raws = rng.integers(-(2 ** 20), 2 ** 20, 500)
        for src_frac in (0, 4, 12):
            for fmt in [FixedFormat(16, 6), FixedFormat(10, 4, rounding=ROUND_NEAREST_EVEN),
                        FixedFormat(9, 3, overflow=OVERFLOW_WRAP)]:
                got = requantize_array(raws.copy(), src_frac, fmt)
                want = np.array([requantize(int(r), src_frac, fmt) for r in raws])
                assert np.array_equal(got, want)

    def test_saturating_reduce_slow_path(self):
        # terms crafted so partial sums escape the range and must clamp
        acc = FixedFormat(8, 8)  # integers in [-128, 127]
        terms = np.array([[100, 100, -250, 10]], dtype=np.int64)
        got = saturating_reduce(terms, acc)
        running = 0
        for t in terms[0]:
            running = max(acc.raw_min, min(acc.raw_max, running + int(t)))
        assert got[0] == running  # 100 -> 127 -> -123 -> -113
        assert got[0] == -113

    def test_wrap_reduce_matches_stepwise(self):
        acc = FixedFormat(8, 8, overflow=OVERFLOW_WRAP)
        rng = np.random.default_rng(5)
        terms = rng.integers(-128, 128, (20, 9)).astype(np.int64)
        got = saturating_reduce(terms, acc)
        for row, g in zip(terms, got):
            running = 0
            for t in row:
                s = (running + int(t)) % 256
                running = s - 256 if s > 127 else s
            assert running == int(g)

    def test_qmatmul_matches_scalar_loops(self):
        rng = np.random.default_rng(6)
        a_fmt = FixedFormat(12, 5)
        b_fmt = FixedFormat(10, 4)
        acc = FixedFormat(14, 9)  # tight: saturation will happen
        out = FixedFormat(12, 5)
        for _ in range(20):
            n, k, m = rng.integers(1, 5, 3)
            a = qtensor_from_floats(rng.uniform(-10, 10, (n, k)), a_fmt)
            b = qtensor_from_floats(rng.uniform(-10, 10, (k, m)), b_fmt)
            bias = qtensor_from_floats(rng.uniform(-2, 2, m), b_fmt)
            got = qmatmul(a, b, acc, out, bias=bias)
            for i in range(n):
                for j in range(m):
                    terms = [fx_mul(a.scalar(i * k + t), b.scalar(t * m + j), acc)
                             for t in range(k)]
                    s = accumulate(terms, acc)
                    s = fx_add(s, bias.scalar(j), acc)
                    assert int(got.mat[i, j]) == requantize(s.raw, acc.fractional_bits, out)

    def test_wide_formats_object_path(self):
        # formats too wide for int64 intermediates fall back to exact ints
        f = FixedFormat(40, 10)
        acc = FixedFormat(60, 20)
        rng = np.random.default_rng(8)
        a = qtensor_from_floats(rng.uniform(-100, 100, (2, 3)), f)
        b = qtensor_from_floats(rng.uniform(-100, 100, (3, 2)), f)
        got = qmatmul(a, b, acc, f)
        for i in range(2):
            for j in range(2):
                terms = [fx_mul(a.scalar(i * 3 + t), b.scalar(t * 2 + j), acc) for t in range(3)]
                s = accumulate(terms, acc)
                assert int(got.mat[i, j]) == requantize(s.raw, acc.fractional_bits, f)

    def test_add_arrays_matches_scalar(self):
        rng = np.random.default_rng(9)
        fa, fb, fo = FixedFormat(16, 6), FixedFormat(12, 4), FixedFormat(14, 6)
        a = qtensor_from_floats(rng.uniform(-20, 20, (4, 4)), fa)
        b = qtensor_from_floats(rng.uniform(-20, 20, (4, 4)), fb)
        got = add_arrays(a.mat, fa, b.mat, fb, fo)
        for i in range(4):
            for j in range(4):
                want = fx_add(a.scalar(i * 4 + j), b.scalar(i * 4 + j), fo).raw
                assert int(got[i, j]) == want


class TestQTensor:
    def test_shape_invariant(self):
        with pytest.raises(FixedPointError):
            QTensor((2, 3), np.zeros(5, dtype=np.int64), U74)

    def test_roundtrip(self):
        f = FixedFormat(16, 6)
        x = np.array([[0.5, -1.25], [3.0, 0.0]])
        t = qtensor_from_floats(x, f)
        assert np.array_equal(t.to_floats(), x)
