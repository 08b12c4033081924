"""Analytical DSP/BRAM/FF/LUT estimation for a (model, format, reuse) triple.

The model is deliberately simple and documented: DSP count is the number
of parallel multipliers after reuse-factor sharing, doubled once operand
width exceeds the hard-multiplier input width; FF and LUT are affine in
(operand width x parallel multipliers) plus storage registers; weight
arrays sit in registers when fully parallel (reuse 1) and move to BRAM
once the reuse factor partitions them.  Key/value attention banks stay in
registers so every row is addressable in parallel.  Absolute numbers are
illustrative calibration; the asserted content is the trends.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataflow import PipelineSchedule, ReuseConfig, build_schedule, simulate
from .kernels import QDense, QLayerNorm, QMHA, QModel, quantize_model
from .model import ModelGraph


@dataclass(frozen=True)
class CostCoefficients:
    dsp_input_width: int = 18      # operand bits one DSP can take
    ff_per_mult_bit: float = 2.0   # FFs per parallel multiplier per operand bit
    lut_per_mult_bit: float = 6.0
    ff_per_stage: int = 64         # control/pipeline overhead per stage
    lut_per_stage: int = 96
    bram_block_bits: int = 36864   # 36 Kbit blocks


@dataclass
class LayerResources:
    name: str
    dsp: int
    ff: int
    lut: int
    bram_bits: int


@dataclass
class ResourceReport:
    dsp: int
    ff: int
    lut: int
    bram_bits: int
    bram_blocks: int
    per_layer: list

    def to_json(self) -> str:
        import json
        return json.dumps({
            "dsp": self.dsp, "ff": self.ff, "lut": self.lut,
            "bram_bits": self.bram_bits, "bram_blocks": self.bram_blocks,
            "per_layer": [vars(l) for l in self.per_layer],
        }, indent=1)

    def table(self) -> str:
        lines = [f"{'layer':<24} {'dsp':>8} {'ff':>10} {'lut':>10} {'bram_bits':>12}"]
        for l in self.per_layer:
            lines.append(f"{l.name:<24} {l.dsp:>8} {l.ff:>10} {l.lut:>10} {l.bram_bits:>12}")
        lines.append(f"{'total':<24} {self.dsp:>8} {self.ff:>10} {self.lut:>10} "
                     f"{self.bram_bits:>12}  ({self.bram_blocks} blocks)")
        return "\n".join(lines)

    def to_csv(self) -> str:
        rows = [{"layer": l.name, "dsp": l.dsp, "ff": l.ff, "lut": l.lut,
                 "bram_bits": l.bram_bits} for l in self.per_layer]
        rows.append({"layer": "total", "dsp": self.dsp, "ff": self.ff,
                     "lut": self.lut, "bram_bits": self.bram_bits})
        return rows_to_csv(rows, ["layer", "dsp", "ff", "lut", "bram_bits"])


def dsp_per_multiply(operand_width: int, dsp_input_width: int) -> int:
    return 1 if operand_width <= dsp_input_width else 2


def _weight_bits(qlayer, wbits: int) -> int:
    if isinstance(qlayer, QDense):
        return (qlayer.w.raw.size + qlayer.b.raw.size) * wbits
    if isinstance(qlayer, QMHA):
        n = sum(t.raw.size for t in qlayer.w_q + qlayer.w_k + qlayer.w_v)
        n += qlayer.w_o.raw.size + qlayer.b_o.raw.size
        return n * wbits
    if isinstance(qlayer, QLayerNorm):
        return (qlayer.gamma.raw.size + qlayer.beta.raw.size) * wbits
    return 0


def estimate_resources(qm: QModel, rc: ReuseConfig,
                       coeffs: CostCoefficients | None = None,
                       sched: PipelineSchedule | None = None) -> ResourceReport:
    coeffs = coeffs or CostCoefficients()
    sched = sched or build_schedule(qm, rc)
    cfg = qm.cfg
    width = max(cfg.activation_format.total_bits, cfg.weight_format.total_bits)
    abits = cfg.activation_format.total_bits
    wbits = cfg.weight_format.total_bits
    per_mul = dsp_per_multiply(width, coeffs.dsp_input_width)

    per_layer: dict[int, LayerResources] = {}
    for idx, qlayer in enumerate(qm.layers):
        per_layer[idx] = LayerResources(
            name=f"L{idx}.{qlayer.kind}", dsp=0, ff=0, lut=0, bram_bits=0)

    for st in sched.stages:
        entry = per_layer[st.layer_index]
        parallel = math.ceil(st.mults_per_row / rc.reuse) if st.mults_per_row else 0
        entry.dsp += parallel * per_mul
        entry.ff += int(coeffs.ff_per_mult_bit * parallel * width) + coeffs.ff_per_stage
        entry.lut += int(coeffs.lut_per_mult_bit * parallel * width) + coeffs.lut_per_stage

    for idx, qlayer in enumerate(qm.layers):
        entry = per_layer[idx]
        wb = _weight_bits(qlayer, wbits)
        if rc.reuse == 1:
            entry.ff += wb          # fully partitioned into registers
        else:
            entry.bram_bits += wb   # reuse-driven partitioning lands in BRAM
        if isinstance(qlayer, QMHA):
            # key/value banks stay fully partitioned for parallel row access
            kv_bits = 2 * qlayer.heads * qm.graph.seq_len * qlayer.d_k * abits
            entry.ff += kv_bits

    # FIFO storage between stages is register-based (constant across reuse)
    for ch in sched.channels:
        if ch.src >= 0:
            per_layer[sched.stages[ch.src].layer_index].ff += ch.depth * ch.width * abits

    layers = [per_layer[i] for i in sorted(per_layer)]
    dsp = sum(l.dsp for l in layers)
    ff = sum(l.ff for l in layers)
    lut = sum(l.lut for l in layers)
    bram_bits = sum(l.bram_bits for l in layers)
    return ResourceReport(
        dsp=dsp, ff=ff, lut=lut, bram_bits=bram_bits,
        bram_blocks=math.ceil(bram_bits / coeffs.bram_block_bits) if bram_bits else 0,
        per_layer=layers)


SWEEP_COLUMNS = ["format", "frac_bits", "reuse", "dsp", "ff", "lut", "bram_blocks",
                 "interval_cycles", "latency_cycles", "latency_us"]


def pareto_sweep(g: ModelGraph, configs: list, reuses: list,
                 coeffs: CostCoefficients | None = None,
                 clock_period_ns: float = 5.0) -> list[dict]:
    """One row per (quantization config, reuse factor): resources plus the
    simulated interval/latency.  Timing is value-independent, so latency
    is measured on a zero input."""
    if not configs or not reuses:
        raise ValueError("formats and reuses must be nonempty")
    rows = []
    x = np.zeros((g.seq_len, g.input_dim))
    for cfg in configs:
        qm = quantize_model(g, cfg)
        for r in reuses:
            rc = ReuseConfig(reuse=r, clock_period_ns=clock_period_ns)
            sched = build_schedule(qm, rc)
            rep = estimate_resources(qm, rc, coeffs, sched)
            _, cyc = simulate(sched, x)
            rows.append({
                "format": str(cfg.activation_format),
                "frac_bits": cfg.activation_format.fractional_bits,
                "reuse": r,
                "dsp": rep.dsp, "ff": rep.ff, "lut": rep.lut,
                "bram_blocks": rep.bram_blocks,
                "interval_cycles": cyc.initiation_interval_cycles,
                "latency_cycles": cyc.total_latency_cycles,
                "latency_us": cyc.latency_us,
            })
    return rows


def rows_to_csv(rows: list[dict], columns: list[str]) -> str:
    lines = [",".join(columns)]
    for r in rows:
        lines.append(",".join(_csv_cell(r[c]) for c in columns))
    return "\n".join(lines) + "\n"


def _csv_cell(v) -> str:
    if isinstance(v, float):
        return format(v, ".10g")
    return str(v)
