"""Fixed-point layer kernels in two flavors: batch (whole matrix at once)
and streaming (one time-step row at a time).  Both flavors share the same
arithmetic helpers and are bit-identical by construction; the streaming
forms mirror the stage organization used by FPGA pipelines (per-head
projection into FIFOs/registers, score+softmax, weighted sum, concat and
output projection).

Numeric conventions, applied uniformly:
  * weights are pre-quantized once into the weight format;
  * dot products accumulate in the accumulator format (each product cast
    in, summed left to right with the accumulator's overflow policy) and
    are then cast to the activation format;
  * attention scores stay in the accumulator format until after the
    1/sqrt(d_k) scale, then drop to the activation format before softmax;
  * softmax arguments are shifted by the row maximum so the exp table
    only ever needs the nonpositive half-line;
  * reciprocal constants (1/d, 1/rows, 1/sqrt(d_k)) are quantized once in
    the weight format and applied as multiplications.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fixedpoint import (
    FixedFormat,
    FixedPointError,
    FixedScalar,
    QTensor,
    add_arrays,
    dequantize_array,
    qmatmul,
    qtensor_from_floats,
    quantize,
    quantize_array,
    requantize_array,
    saturating_reduce,
)
from .lut import LutSpec, LutTable, build_lut, lookup_array
from .model import MHA, Dense, LayerNorm, ModelGraph, PoolOverTime, ResidualAdd

SOFTMAX_VARIANTS = ("restructured", "legacy")


@dataclass
class OpCounter:
    exp_lookups: int = 0
    reciprocal_lookups: int = 0
    invsqrt_lookups: int = 0
    multiplies: int = 0
    adds: int = 0

    def reset(self) -> None:
        self.exp_lookups = self.reciprocal_lookups = self.invsqrt_lookups = 0
        self.multiplies = self.adds = 0


@dataclass
class QuantConfig:
    weight_format: FixedFormat
    activation_format: FixedFormat
    accumulator_format: FixedFormat
    lut_specs: dict[str, LutSpec]
    softmax_variant: str = "restructured"
    _tables: dict[str, LutTable] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.accumulator_format.integer_bits < self.activation_format.integer_bits:
            raise FixedPointError("accumulator integer bits must cover activation integer bits")
        if self.softmax_variant not in SOFTMAX_VARIANTS:
            raise FixedPointError(f"unknown softmax variant {self.softmax_variant!r}")

    def table(self, name: str) -> LutTable:
        if name not in self._tables:
            self._tables[name] = build_lut(self.lut_specs[name])
        return self._tables[name]

    @property
    def eps_var(self) -> float:
        """Variance floor ahead of the inverse-sqrt lookup: the smallest
        positive activation value."""
        return self.activation_format.step()


def default_quant_config(activation: FixedFormat | None = None,
                         weight: FixedFormat | None = None,
                         accumulator: FixedFormat | None = None,
                         seq_len: int = 100,
                         softmax_variant: str = "restructured",
                         exp_table_size: int = 4096,
                         recip_table_size: int = 16384,
                         invsqrt_table_size: int = 4096,
                         exp_lo: float = -8.0,
                         invsqrt_hi: float = 16.0) -> QuantConfig:
    """Build a QuantConfig with derived LUT domains.

    The accumulator defaults to 10 integer bits (sign included) over the
    activation's fractional width.  Table domains: exp over [exp_lo, 0]
    (softmax arguments are max-shifted), reciprocal over softmax-sum and
    sigmoid-denominator range (0.5, seq_len+1], inverse sqrt over
    [activation step, invsqrt_hi].  The legacy softmax needs signed exp
    arguments and larger sums, so it gets its own wider tables.
    """
    act = activation or FixedFormat(16, 6)
    wgt = weight or act
    acc = accumulator or FixedFormat(10 + act.fractional_bits, 10)
    recip_hi = float(max(2, seq_len) + 1)
    wide_hi = 8.0
    wide_int = math.ceil(math.log2(math.exp(wide_hi))) + 2  # fits e^hi plus sign
    wide_total = min(wide_int + act.fractional_bits, 50)
    specs = {
        "exp": LutSpec("exp", exp_table_size, exp_lo, 0.0, act),
        "reciprocal": LutSpec("reciprocal", recip_table_size, 0.5, recip_hi, act),
        "inv_sqrt": LutSpec("inv_sqrt", invsqrt_table_size, act.step(), invsqrt_hi, act),
        "exp_legacy": LutSpec("exp", exp_table_size, -wide_hi, wide_hi,
                              FixedFormat(wide_total, wide_int)),
        "reciprocal_legacy": LutSpec("reciprocal", recip_table_size, 0.5,
                                     8.0 * max(2, seq_len), act),
    }
    return QuantConfig(wgt, act, acc, specs, softmax_variant)


# ---------------------------------------------------------------------------
# Quantized layer records
# ---------------------------------------------------------------------------

@dataclass
class QDense:
    units: int
    activation: str
    w: QTensor
    b: QTensor
    kind: str = "dense"


@dataclass
class QMHA:
    heads: int
    d_model: int
    d_k: int
    w_q: list  # per-head QTensor [d_model, d_k]
    w_k: list
    w_v: list
    w_o: QTensor
    b_o: QTensor
    scale: FixedScalar  # 1/sqrt(d_k), quantized once
    kind: str = "mha"


@dataclass
class QLayerNorm:
    gamma: QTensor
    beta: QTensor
    inv_d: FixedScalar
    kind: str = "layer_norm"


@dataclass
class QResidualAdd:
    source: int
    kind: str = "residual_add"


@dataclass
class QPool:
    inv_rows: FixedScalar
    kind: str = "pool_mean"


@dataclass
class QModel:
    graph: ModelGraph
    cfg: QuantConfig
    layers: list
    quant_errors: list  # per layer, max |w - dequantize(quantize(w))|


def _q(arr: np.ndarray, fmt: FixedFormat) -> QTensor:
    return qtensor_from_floats(arr, fmt)


def _quant_err(arr: np.ndarray, fmt: FixedFormat) -> float:
    q = quantize_array(arr, fmt)
    return float(np.abs(dequantize_array(q, fmt) - arr).max()) if arr.size else 0.0


def quantize_model(g: ModelGraph, cfg: QuantConfig) -> QModel:
    """One-shot post-training quantization of all weights into the weight
    format, with a per-layer record of the largest rounding error."""
    wf = cfg.weight_format
    qlayers = []
    errors = []
    for layer in g.layers:
        if isinstance(layer, Dense):
            qlayers.append(QDense(layer.units, layer.activation, _q(layer.w, wf), _q(layer.b, wf)))
            errors.append(max(_quant_err(layer.w, wf), _quant_err(layer.b, wf)))
        elif isinstance(layer, MHA):
            qlayers.append(QMHA(
                layer.heads, layer.d_model, layer.d_k,
                [_q(layer.w_q[h], wf) for h in range(layer.heads)],
                [_q(layer.w_k[h], wf) for h in range(layer.heads)],
                [_q(layer.w_v[h], wf) for h in range(layer.heads)],
                _q(layer.w_o, wf), _q(layer.b_o, wf),
                quantize(1.0 / math.sqrt(layer.d_k), wf)))
            errors.append(max(_quant_err(layer.w_q, wf), _quant_err(layer.w_k, wf),
                              _quant_err(layer.w_v, wf), _quant_err(layer.w_o, wf),
                              _quant_err(layer.b_o, wf)))
        elif isinstance(layer, LayerNorm):
            d = layer.gamma.shape[0]
            qlayers.append(QLayerNorm(_q(layer.gamma, wf), _q(layer.beta, wf),
                                      quantize(1.0 / d, wf)))
            errors.append(max(_quant_err(layer.gamma, wf), _quant_err(layer.beta, wf)))
        elif isinstance(layer, ResidualAdd):
            qlayers.append(QResidualAdd(layer.source))
            errors.append(0.0)
        elif isinstance(layer, PoolOverTime):
            qlayers.append(QPool(quantize(1.0 / g.seq_len, wf)))
            errors.append(0.0)
    return QModel(g, cfg, qlayers, errors)


# ---------------------------------------------------------------------------
# Softmax (both variants) and sigmoid
# ---------------------------------------------------------------------------

def _count(counter: OpCounter | None, **deltas) -> None:
    if counter is not None:
        for k, v in deltas.items():
            setattr(counter, k, getattr(counter, k) + v)


def _mul_exact(a: np.ndarray, b, bits: int) -> np.ndarray:
    """Elementwise product, promoted to exact Python ints when the result
    could overflow int64."""
    if bits > 62 and a.dtype != object:
        a = a.astype(object)
    return a * b


def _softmax_rows_restructured(raw: np.ndarray, cfg: QuantConfig,
                               counter: OpCounter | None) -> np.ndarray:
    """Row-wise softmax, three phases: exp lookups of max-shifted inputs,
    one summed+inverted denominator per row, then an elementwise scale."""
    act = cfg.activation_format
    acc = cfg.accumulator_format
    exp_t, rec_t = cfg.table("exp"), cfg.table("reciprocal")
    rows, k = raw.shape
    shifted = raw - raw.max(axis=-1, keepdims=True)
    e_raw = lookup_array(exp_t, shifted, act)                       # [rows, k]
    e_fmt = exp_t.spec.entry_format
    terms = requantize_array(e_raw, e_fmt.fractional_bits, acc)
    s_raw = saturating_reduce(terms, acc)                           # [rows]
    r_raw = lookup_array(rec_t, s_raw, acc)                         # [rows]
    r_fmt = rec_t.spec.entry_format
    prod = _mul_exact(e_raw, r_raw[:, None], e_fmt.total_bits + r_fmt.total_bits)
    out = requantize_array(prod, e_fmt.fractional_bits + r_fmt.fractional_bits, act)
    _count(counter, exp_lookups=rows * k, reciprocal_lookups=rows,
           multiplies=rows * k, adds=rows * k)
    return out


def _legacy_sum_format(cfg: QuantConfig, k: int) -> FixedFormat:
    # sums of up to k wide exp entries need extra integer headroom
    entry = cfg.lut_specs["exp_legacy"].entry_format
    ibits = entry.integer_bits + max(1, k).bit_length()
    total = min(ibits + cfg.accumulator_format.fractional_bits, 60)
    return FixedFormat(total, ibits)


def _softmax_rows_legacy(raw: np.ndarray, cfg: QuantConfig,
                         counter: OpCounter | None) -> np.ndarray:
    """Row-wise softmax via the inverted-sum form: every output element
    sums exp lookups over all pairwise differences, costing k^2 lookups."""
    act = cfg.activation_format
    exp_t, rec_t = cfg.table("exp_legacy"), cfg.table("reciprocal_legacy")
    rows, k = raw.shape
    # diffs[r, i, j] = z_j - z_i
    diffs = raw[:, None, :] - raw[:, :, None]
    e_raw = lookup_array(exp_t, diffs, act)
    e_fmt = exp_t.spec.entry_format
    sum_fmt = _legacy_sum_format(cfg, k)
    terms = requantize_array(e_raw, e_fmt.fractional_bits, sum_fmt)
    s_raw = saturating_reduce(terms, sum_fmt)                       # [rows, k]
    r_raw = lookup_array(rec_t, s_raw, sum_fmt)
    out = requantize_array(r_raw, rec_t.spec.entry_format.fractional_bits, act)
    _count(counter, exp_lookups=rows * k * k, reciprocal_lookups=rows * k,
           adds=rows * k * k)
    return out


def _softmax_rows(raw: np.ndarray, cfg: QuantConfig, counter: OpCounter | None) -> np.ndarray:
    if cfg.softmax_variant == "legacy":
        return _softmax_rows_legacy(raw, cfg, counter)
    return _softmax_rows_restructured(raw, cfg, counter)


def softmax_restructured(z: QTensor, cfg: QuantConfig,
                         counter: OpCounter | None = None) -> QTensor:
    raw = _softmax_rows_restructured(z.raw.reshape(1, -1), cfg, counter)
    return QTensor(z.shape, raw.reshape(-1), cfg.activation_format)


def softmax_legacy(z: QTensor, cfg: QuantConfig,
                   counter: OpCounter | None = None) -> QTensor:
    raw = _softmax_rows_legacy(z.raw.reshape(1, -1), cfg, counter)
    return QTensor(z.shape, raw.reshape(-1), cfg.activation_format)


def _sigmoid_rows(raw: np.ndarray, cfg: QuantConfig, counter: OpCounter | None) -> np.ndarray:
    """Elementwise logistic via the exp and reciprocal tables:
    t = exp(-|x|), r = 1/(1+t); result is r for x >= 0 else t*r."""
    act = cfg.activation_format
    exp_t, rec_t = cfg.table("exp"), cfg.table("reciprocal")
    neg_abs = -np.abs(raw)
    t_raw = lookup_array(exp_t, neg_abs, act)
    t_fmt = exp_t.spec.entry_format
    one = quantize(1.0, act).raw
    denom = add_arrays(t_raw, t_fmt, np.full_like(t_raw, one), act, act)
    r_raw = lookup_array(rec_t, denom, act)
    r_fmt = rec_t.spec.entry_format
    pos = requantize_array(r_raw, r_fmt.fractional_bits, act)
    prod = _mul_exact(t_raw, r_raw, t_fmt.total_bits + r_fmt.total_bits)
    neg = requantize_array(prod, t_fmt.fractional_bits + r_fmt.fractional_bits, act)
    out = np.where(raw >= 0, pos, neg)
    _count(counter, exp_lookups=raw.size, reciprocal_lookups=raw.size,
           multiplies=int((raw < 0).sum()), adds=raw.size)
    return out


# ---------------------------------------------------------------------------
# Layer kernels (batch)
# ---------------------------------------------------------------------------

def _apply_activation(y: QTensor, activation: str, cfg: QuantConfig,
                      counter: OpCounter | None) -> QTensor:
    if activation == "relu":
        return QTensor(y.shape, np.maximum(y.raw, 0), y.format)
    if activation == "sigmoid":
        raw = _sigmoid_rows(y.mat, cfg, counter)
        return QTensor(y.shape, raw.reshape(-1), y.format)
    if activation == "softmax":
        raw = _softmax_rows(y.mat, cfg, counter)
        return QTensor(y.shape, raw.reshape(-1), y.format)
    return y


def dense_q(x: QTensor, layer: QDense, cfg: QuantConfig,
            counter: OpCounter | None = None) -> QTensor:
    if len(x.shape) == 1:  # single row in, single row out
        out = dense_q(QTensor((1, x.shape[0]), x.raw, x.format), layer, cfg, counter)
        return QTensor((out.shape[1],), out.raw, out.format)
    rows, d_in = x.shape
    y = qmatmul(x, layer.w, cfg.accumulator_format, cfg.activation_format, bias=layer.b)
    _count(counter, multiplies=rows * d_in * layer.units,
           adds=rows * layer.units * (d_in + 1))
    return _apply_activation(y, layer.activation, cfg, counter)


def residual_add_q(a: QTensor, b: QTensor, cfg: QuantConfig,
                   counter: OpCounter | None = None) -> QTensor:
    if a.shape != b.shape:
        raise FixedPointError(f"residual shape mismatch {a.shape} vs {b.shape}")
    raw = add_arrays(a.mat, a.format, b.mat, b.format, cfg.activation_format)
    _count(counter, adds=a.raw.size)
    return QTensor(a.shape, raw.reshape(-1), cfg.activation_format)


def layernorm_q(x: QTensor, layer: QLayerNorm, cfg: QuantConfig,
                counter: OpCounter | None = None) -> QTensor:
    """Per-row normalization in five steps: mean (sum times 1/d), deviation
    from mean, variance (sum of squares times 1/d), inverse-sqrt lookup of
    the variance (floored at eps_var), then scale and shift."""
    if len(x.shape) == 1:
        out = layernorm_q(QTensor((1, x.shape[0]), x.raw, x.format), layer, cfg, counter)
        return QTensor((out.shape[1],), out.raw, out.format)
    act, acc, wf = cfg.activation_format, cfg.accumulator_format, cfg.weight_format
    rows, d = x.shape
    inv_t = cfg.table("inv_sqrt")
    xm = x.mat
    # stage 1: mean
    terms = requantize_array(xm, act.fractional_bits, acc)
    total = saturating_reduce(terms, acc)                                   # [rows]
    inv_d = layer.inv_d.raw
    mean = requantize_array(_mul_exact(total, inv_d, acc.total_bits + wf.total_bits),
                            acc.fractional_bits + wf.fractional_bits, acc)  # [rows]
    # stage 2: deviation from mean, back in activation format
    shift = acc.fractional_bits - act.fractional_bits
    up = _mul_exact(xm, 1 << shift, act.total_bits + shift)
    dm = requantize_array(up - mean[:, None], acc.fractional_bits, act)     # [rows, d]
    # stage 3: variance
    sq = requantize_array(_mul_exact(dm, dm, 2 * act.total_bits),
                          2 * act.fractional_bits, acc)
    var_sum = saturating_reduce(sq, acc)
    var = requantize_array(_mul_exact(var_sum, inv_d, acc.total_bits + wf.total_bits),
                           acc.fractional_bits + wf.fractional_bits, acc)   # [rows]
    # stage 4: normalize by 1/sqrt(var), variance floored to keep the
    # lookup in-domain for constant rows
    eps_raw = max(1, 1 << shift)
    var = np.maximum(var, eps_raw)
    inv_raw = lookup_array(inv_t, var, acc)                                 # [rows]
    inv_fmt = inv_t.spec.entry_format
    normalized = requantize_array(
        _mul_exact(dm, inv_raw[:, None], act.total_bits + inv_fmt.total_bits),
        act.fractional_bits + inv_fmt.fractional_bits, act)
    # stage 5: scale by gamma, add beta
    scaled = requantize_array(
        _mul_exact(normalized, layer.gamma.raw[None, :], act.total_bits + wf.total_bits),
        act.fractional_bits + wf.fractional_bits, act)
    out = add_arrays(scaled, act, np.broadcast_to(layer.beta.raw, scaled.shape), wf, act)
    _count(counter, invsqrt_lookups=rows, multiplies=rows * (3 * d + 2),
           adds=rows * 3 * d)
    return QTensor(x.shape, out.reshape(-1), act)


def pool_q(x: QTensor, layer: QPool, cfg: QuantConfig,
           counter: OpCounter | None = None) -> QTensor:
    act, acc, wf = cfg.activation_format, cfg.accumulator_format, cfg.weight_format
    rows, d = x.shape
    terms = requantize_array(x.mat.T, act.fractional_bits, acc)   # [d, rows]
    total = saturating_reduce(terms, acc)
    mean = requantize_array(_mul_exact(total, layer.inv_rows.raw,
                                       acc.total_bits + wf.total_bits),
                            acc.fractional_bits + wf.fractional_bits, act)
    _count(counter, multiplies=d, adds=rows * d)
    return QTensor((1, d), mean.reshape(-1), act)


def _mha_head_scores(q: QTensor, k: QTensor, layer: QMHA, cfg: QuantConfig) -> QTensor:
    """Score rows for one head: dot products kept in the accumulator format,
    scaled by the prequantized 1/sqrt(d_k), then cast to activations."""
    acc, act = cfg.accumulator_format, cfg.activation_format
    kt = QTensor((k.shape[1], k.shape[0]), np.ascontiguousarray(k.mat.T).reshape(-1), k.format)
    scores = qmatmul(q, kt, acc, acc)
    scaled = requantize_array(
        _mul_exact(scores.mat, layer.scale.raw,
                   acc.total_bits + layer.scale.format.total_bits),
        acc.fractional_bits + layer.scale.format.fractional_bits, act)
    return QTensor(scores.shape, scaled.reshape(-1), act)


def mha_q_batch(x: QTensor, layer: QMHA, cfg: QuantConfig,
                counter: OpCounter | None = None) -> QTensor:
    acc, act = cfg.accumulator_format, cfg.activation_format
    seq, dm = x.shape
    head_outs = []
    for h in range(layer.heads):
        q = qmatmul(x, layer.w_q[h], acc, act)
        k = qmatmul(x, layer.w_k[h], acc, act)
        v = qmatmul(x, layer.w_v[h], acc, act)
        scores = _mha_head_scores(q, k, layer, cfg)
        attn_raw = _softmax_rows(scores.mat, cfg, counter)
        attn = QTensor(scores.shape, attn_raw.reshape(-1), act)
        head_outs.append(qmatmul(attn, v, acc, act))
        _count(counter, multiplies=seq * dm * layer.d_k * 3 + seq * seq * layer.d_k * 2 + seq * seq,
               adds=seq * layer.d_k * (dm * 3 + seq) + seq * seq * layer.d_k)
    cat = np.concatenate([ho.mat for ho in head_outs], axis=1)
    cat_t = QTensor(cat.shape, cat.reshape(-1), act)
    out = qmatmul(cat_t, layer.w_o, acc, act, bias=layer.b_o)
    _count(counter, multiplies=seq * layer.heads * layer.d_k * dm,
           adds=seq * dm * (layer.heads * layer.d_k + 1))
    return out


class StreamError(RuntimeError):
    pass


def mha_q_stream(rows, layer: QMHA, cfg: QuantConfig,
                 seq_len: int, counter: OpCounter | None = None):
    """Row-stream MHA organized as four pipeline stages: (1) project each
    incoming row, queueing query rows while filling the key/value register
    banks; (2) per query row, score against all keys, scale and softmax;
    (3) weighted sum of value rows per score row; (4) concatenate head
    outputs and apply the output projection one row at a time.

    Consumes exactly `seq_len` rows and yields `seq_len` output rows,
    bit-identical to mha_q_batch on the same data.
    """
    acc, act = cfg.accumulator_format, cfg.activation_format
    h = layer.heads
    q_fifo: list[list[QTensor]] = [[] for _ in range(h)]
    k_regs: list[list[np.ndarray]] = [[] for _ in range(h)]  # fully partitioned
    v_regs: list[list[np.ndarray]] = [[] for _ in range(h)]

    # stage 1: one projected row per step
    it = iter(rows)
    for t in range(seq_len):
        try:
            row = next(it)
        except StopIteration:
            raise StreamError("truncated sequence")
        rt = QTensor((1, layer.d_model), row.raw.reshape(-1), row.format)
        for head in range(h):
            q_fifo[head].append(qmatmul(rt, layer.w_q[head], acc, act))
            k_regs[head].append(qmatmul(rt, layer.w_k[head], acc, act).raw)
            v_regs[head].append(qmatmul(rt, layer.w_v[head], acc, act).raw)
    try:
        next(it)
        raise StreamError("sequence overflow")
    except StopIteration:
        pass

    s_fifo: list[list[QTensor]] = [[] for _ in range(h)]
    v_mats: list[QTensor] = []
    for head in range(h):
        k_mat = QTensor((seq_len, layer.d_k), np.stack(k_regs[head]).reshape(-1), act)
        # stage 2: score row, scale, softmax; the value rows written
        # row-wise in stage 1 are repacked here for column access
        v_mats.append(QTensor((seq_len, layer.d_k), np.stack(v_regs[head]).reshape(-1), act))
        for q_row in q_fifo[head]:
            scores = _mha_head_scores(q_row, k_mat, layer, cfg)
            attn_raw = _softmax_rows(scores.mat, cfg, counter)
            s_fifo[head].append(QTensor(scores.shape, attn_raw.reshape(-1), act))

    o_fifo: list[list[QTensor]] = [[] for _ in range(h)]
    for head in range(h):
        # stage 3: weighted sum of value rows for each score row
        for s_row in s_fifo[head]:
            o_fifo[head].append(qmatmul(s_row, v_mats[head], acc, act))

    # stage 4: concatenate heads and project, one row in / one row out
    for t in range(seq_len):
        cat = np.concatenate([o_fifo[head][t].raw for head in range(h)])
        cat_t = QTensor((1, h * layer.d_k), cat, act)
        out = qmatmul(cat_t, layer.w_o, acc, act, bias=layer.b_o)
        yield QTensor((layer.d_model,), out.raw, act)


# ---------------------------------------------------------------------------
# Whole-model forward passes
# ---------------------------------------------------------------------------

def _run_layer(cur: QTensor, qlayer, cfg: QuantConfig, outs: list,
               counter: OpCounter | None) -> QTensor:
    if isinstance(qlayer, QDense):
        return dense_q(cur, qlayer, cfg, counter)
    if isinstance(qlayer, QMHA):
        return mha_q_batch(cur, qlayer, cfg, counter)
    if isinstance(qlayer, QLayerNorm):
        return layernorm_q(cur, qlayer, cfg, counter)
    if isinstance(qlayer, QResidualAdd):
        return residual_add_q(cur, outs[qlayer.source], cfg, counter)
    if isinstance(qlayer, QPool):
        return pool_q(cur, qlayer, cfg, counter)
    raise FixedPointError(f"unknown quantized layer {type(qlayer).__name__}")


def qforward(qm: QModel, x: np.ndarray, counter: OpCounter | None = None,
             return_all: bool = False):
    """Batch fixed-point forward pass.  Input is quantized into the
    activation format; returns the final QTensor ([features] after
    pooling, else [rows, features])."""
    g = qm.graph
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (g.seq_len, g.input_dim):
        raise FixedPointError(f"input shape {x.shape} != expected ({g.seq_len}, {g.input_dim})")
    cur = qtensor_from_floats(x, qm.cfg.activation_format)
    outs = []
    for qlayer in qm.layers:
        cur = _run_layer(cur, qlayer, qm.cfg, outs, counter)
        outs.append(cur)
    final = cur
    if cur.shape[0] == 1 and any(isinstance(l, QPool) for l in qm.layers):
        final = QTensor((cur.shape[1],), cur.raw, cur.format)
    if return_all:
        return final, outs
    return final


def stream_forward(qm: QModel, x: np.ndarray, counter: OpCounter | None = None) -> QTensor:
    """Row-streaming forward pass: every layer consumes and produces one
    row per step (MHA through its four-stage stream), with earlier layer
    outputs buffered for residual taps.  Bit-identical to qforward."""
    g, cfg = qm.graph, qm.cfg
    x = np.asarray(x, dtype=np.float64)
    act = cfg.activation_format
    cur_rows = [QTensor((g.input_dim,), quantize_array(r, act), act) for r in x]
    outs: list[list[QTensor]] = []
    for qlayer in qm.layers:
        if isinstance(qlayer, QDense):
            nxt = [dense_q(r, qlayer, cfg, counter) for r in cur_rows]
        elif isinstance(qlayer, QMHA):
            nxt = list(mha_q_stream(iter(cur_rows), qlayer, cfg, len(cur_rows), counter))
        elif isinstance(qlayer, QLayerNorm):
            nxt = [layernorm_q(r, qlayer, cfg, counter) for r in cur_rows]
        elif isinstance(qlayer, QResidualAdd):
            src = outs[qlayer.source]
            nxt = []
            for r, s in zip(cur_rows, src):
                o = residual_add_q(r, s, cfg, counter)
                nxt.append(o)
        elif isinstance(qlayer, QPool):
            mat = np.stack([r.raw for r in cur_rows])
            xt = QTensor((len(cur_rows), mat.shape[1]), mat.reshape(-1), act)
            o = pool_q(xt, qlayer, cfg, counter)
            nxt = [QTensor((o.shape[1],), o.raw, o.format)]
        else:
            raise FixedPointError(f"unknown quantized layer {type(qlayer).__name__}")
        cur_rows = nxt
        outs.append(cur_rows)
    if len(cur_rows) == 1 and any(isinstance(l, QPool) for l in qm.layers):
        return cur_rows[0]
    mat = np.stack([r.raw for r in cur_rows])
    return QTensor((len(cur_rows), mat.shape[1]), mat.reshape(-1), act)
