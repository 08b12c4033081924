"""Cycle-level model of the FIFO-connected streaming pipeline.

Each layer expands into its pipeline stages (four for attention, three
for a softmax head, five for layer normalization, one for a dense layer).
Stages are connected by bounded FIFO channels carrying one time-step row
per token.  Multiply stages accept a new row every `reuse` cycles; the
reuse factor never changes computed values, only timing.  Absolute cycle
counts come from a documented, overridable stage-cost table and are
illustrative; the asserted behavior is the scaling and ordering.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .fixedpoint import QTensor
from .kernels import QDense, QLayerNorm, QMHA, QModel, QPool, QResidualAdd, qforward


class DataflowError(RuntimeError):
    pass


class DeadlockError(DataflowError):
    pass


@dataclass(frozen=True)
class ReuseConfig:
    reuse: int = 1
    clock_period_ns: float = 5.0

    def __post_init__(self):
        if self.reuse < 1 or self.reuse & (self.reuse - 1):
            raise ValueError(f"reuse must be a power of two >= 1, got {self.reuse}")
        if not (math.isfinite(self.clock_period_ns) and self.clock_period_ns > 0):
            raise ValueError(f"clock_period_ns must be positive, got {self.clock_period_ns}")


@dataclass(frozen=True)
class StageCosts:
    """Pipeline-depth building blocks (cycles).  Reduction trees cost
    ceil(log2(fan_in)) plus a fixed register margin; table lookups and
    elementwise steps are constants."""
    tree_margin: int = 3
    lut_depth: int = 2
    elementwise: int = 1

    def tree(self, fan_in: int) -> int:
        return max(0, math.ceil(math.log2(max(1, fan_in)))) + self.tree_margin


@dataclass
class StageModel:
    name: str
    layer_index: int
    ii_cycles: int
    pipeline_depth_cycles: int
    rows: int                    # rows consumed per inference
    rows_out: int
    is_multiply: bool
    mults_per_row: int           # parallel multiplications per accepted row
    fan_in: int
    width_in: int
    width_out: int
    barrier_after: int | None = None  # stage index that must finish first


@dataclass
class FifoChannel:
    name: str
    src: int                     # producing stage index (-1 = model input)
    dst: int
    depth: int                   # capacity in rows
    lanes: int
    width: int


@dataclass
class PipelineSchedule:
    qm: QModel
    rc: ReuseConfig
    stages: list
    channels: list
    stage_inputs: list           # per stage, list of channel indices
    stage_outputs: list
    costs: StageCosts = field(default_factory=StageCosts)


@dataclass
class CycleReport:
    total_latency_cycles: int
    initiation_interval_cycles: int
    latency_us: float
    stall_cycles: int
    stage_breakdown: list        # dicts: name, ii, depth, rows, first/last emit
    channel_peaks: dict          # channel name -> peak occupancy
    tokens_produced: dict        # stage name -> rows emitted

    def to_json(self) -> str:
        return json.dumps({
            "total_latency_cycles": self.total_latency_cycles,
            "initiation_interval_cycles": self.initiation_interval_cycles,
            "latency_us": self.latency_us,
            "stall_cycles": self.stall_cycles,
            "stages": self.stage_breakdown,
            "channel_peaks": self.channel_peaks,
        }, indent=1)

    def table(self) -> str:
        lines = [f"{'stage':<28} {'ii':>4} {'depth':>6} {'rows':>5} {'last_emit':>10}"]
        for s in self.stage_breakdown:
            lines.append(f"{s['name']:<28} {s['ii']:>4} {s['depth']:>6} {s['rows']:>5} "
                         f"{s['last_emit']:>10}")
        lines.append(f"interval={self.initiation_interval_cycles} cycles, "
                     f"latency={self.total_latency_cycles} cycles "
                     f"({self.latency_us:.3f} us), stalls={self.stall_cycles}")
        return "\n".join(lines)


def _layer_stages(idx: int, qlayer, rows: int, feat_in: int, costs: StageCosts,
                  reuse: int, seq_len: int):
    """Expand one layer into its StageModels (rows_out of the last stage
    may differ from rows for pooling)."""
    stages = []

    def add(name, mults, fan_in, depth, width_out, rows_in=rows, rows_out=None,
            barrier=False):
        stages.append(StageModel(
            name=f"L{idx}.{name}", layer_index=idx,
            ii_cycles=reuse if mults > 0 else 1,
            pipeline_depth_cycles=depth,
            rows=rows_in, rows_out=rows_in if rows_out is None else rows_out,
            is_multiply=mults > 0, mults_per_row=mults, fan_in=fan_in,
            width_in=feat_in, width_out=width_out,
            barrier_after=-2 if barrier else None))  # -2: previous stage, fixed later

    if isinstance(qlayer, QDense):
        u = qlayer.units
        add("dense", feat_in * u, feat_in, costs.tree(feat_in), u)
        if qlayer.activation == "softmax":
            add("softmax.exp", 0, 1, costs.lut_depth, u)
            add("softmax.sum_inv", 0, u, costs.tree(u) + costs.lut_depth, u)
            add("softmax.scale", u, 1, costs.elementwise, u)
        elif qlayer.activation == "sigmoid":
            add("sigmoid", u, 1, 2 * costs.lut_depth + 2 * costs.elementwise, u)
        return stages, u
    if isinstance(qlayer, QMHA):
        h, dm, dk = qlayer.heads, qlayer.d_model, qlayer.d_k
        softmax_depth = (costs.lut_depth + costs.tree(rows)
                         + costs.lut_depth + costs.elementwise)
        add("mha.proj", 3 * h * dm * dk, dm, costs.tree(dm), h * dk)
        add("mha.score_softmax", h * (rows * dk + 2 * rows), dk,
            costs.tree(dk) + costs.elementwise + softmax_depth, rows, barrier=True)
        add("mha.weighted_sum", h * rows * dk, rows, costs.tree(rows), h * dk)
        add("mha.concat_proj", h * dk * dm, h * dk, costs.tree(h * dk), dm)
        return stages, dm
    if isinstance(qlayer, QLayerNorm):
        d = feat_in
        add("ln.mean", 1, d, costs.tree(d) + costs.elementwise, d)
        add("ln.dev", 0, 1, costs.elementwise, d)
        add("ln.var", d + 1, d, costs.tree(d) + costs.elementwise, d)
        add("ln.norm", d, 1, costs.lut_depth + costs.elementwise, d)
        add("ln.scale", d, 1, 2 * costs.elementwise, d)
        return stages, d
    if isinstance(qlayer, QResidualAdd):
        add("resadd", 0, 1, costs.elementwise, feat_in)
        return stages, feat_in
    if isinstance(qlayer, QPool):
        add("pool", feat_in, rows, costs.tree(rows) + costs.elementwise, feat_in,
            rows_in=rows, rows_out=1)
        return stages, feat_in
    raise DataflowError(f"unknown layer {type(qlayer).__name__}")


def build_schedule(qm: QModel, rc: ReuseConfig, costs: StageCosts | None = None,
                   fifo_depth: int | None = None,
                   fifo_depth_overrides: dict | None = None) -> PipelineSchedule:
    """Expand the quantized model into stages and FIFO channels.

    Channels default to 2*seq_len rows deep; each channel gets
    ceil(width/reuse) parallel lanes, mirroring how FIFO banks are stacked
    to match producer bandwidth.
    """
    costs = costs or StageCosts()
    seq = qm.graph.seq_len
    depth_default = fifo_depth if fifo_depth is not None else 2 * seq
    overrides = fifo_depth_overrides or {}

    stages: list[StageModel] = []
    layer_last_stage: list[int] = []
    rows, feat = seq, qm.graph.input_dim
    for idx, qlayer in enumerate(qm.layers):
        ls, feat = _layer_stages(idx, qlayer, rows, feat, costs, rc.reuse, seq)
        base = len(stages)
        for j, st in enumerate(ls):
            if st.barrier_after == -2:
                st.barrier_after = base + j - 1
        stages.extend(ls)
        layer_last_stage.append(len(stages) - 1)
        rows = ls[-1].rows_out

    channels: list[FifoChannel] = []
    stage_inputs: list[list[int]] = [[] for _ in stages]
    stage_outputs: list[list[int]] = [[] for _ in stages]

    def connect(src: int, dst: int, width: int):
        name = f"{stages[src].name if src >= 0 else 'input'}->{stages[dst].name}"
        depth = overrides.get(name, depth_default)
        lanes = max(1, math.ceil(width / rc.reuse))
        ch = FifoChannel(name=name, src=src, dst=dst, depth=depth, lanes=lanes, width=width)
        channels.append(ch)
        ci = len(channels) - 1
        if src >= 0:
            stage_outputs[src].append(ci)
        stage_inputs[dst].append(ci)

    # chain within and across layers
    first_of_layer = []
    pos = 0
    for idx, qlayer in enumerate(qm.layers):
        n = layer_last_stage[idx] - pos + 1
        first_of_layer.append(pos)
        pos = layer_last_stage[idx] + 1
    prev_out = -1
    width = qm.graph.input_dim
    for si, st in enumerate(stages):
        connect(prev_out, si, width if prev_out == -1 else stages[prev_out].width_out)
        prev_out = si
        width = st.width_out
    # residual taps
    for idx, qlayer in enumerate(qm.layers):
        if isinstance(qlayer, QResidualAdd):
            src_stage = layer_last_stage[qlayer.source]
            dst_stage = first_of_layer[idx]
            connect(src_stage, dst_stage, stages[src_stage].width_out)

    return PipelineSchedule(qm, rc, stages, channels, stage_inputs, stage_outputs, costs)


def analytic_interval(sched: PipelineSchedule) -> int:
    """Cycles between consecutive inferences: the busiest stage's
    occupancy (rows times per-row initiation interval)."""
    return max(st.rows * st.ii_cycles for st in sched.stages)


def simulate(sched: PipelineSchedule, x: np.ndarray | QTensor,
             trace: list | None = None) -> tuple[QTensor, CycleReport]:
    """Run one inference through the pipeline.

    Values are produced by the batch kernels (the schedule never alters
    arithmetic); the cycle accounting comes from stepping tokens through
    the stages and bounded channels.  Deterministic for fixed inputs.
    """
    if isinstance(x, QTensor):
        x = x.to_floats()
    output = qforward(sched.qm, x)

    stages = sched.stages
    nstages = len(stages)
    occupancy = [0] * len(sched.channels)          # rows currently queued
    peaks = [0] * len(sched.channels)
    src_available = [0] * len(sched.channels)      # rows pushed by source so far
    consumed = [0] * nstages
    produced = [0] * nstages
    inflight: list[list[int]] = [[] for _ in range(nstages)]  # completion cycles
    next_accept = [0] * nstages
    first_emit = [-1] * nstages
    last_emit = [-1] * nstages
    stall_cycles = 0

    # model input: all rows available at cycle 0
    for ci in sched.stage_inputs[0]:
        if sched.channels[ci].src == -1:
            occupancy[ci] = stages[0].rows
            peaks[ci] = stages[0].rows

    total_rows = sum(st.rows for st in stages)
    total_depth = sum(st.pipeline_depth_cycles for st in stages)
    quiet_limit = max(1, total_depth * total_rows)

    done_rows = stages[-1].rows_out
    cycle = 0
    quiet = 0
    while produced[-1] < done_rows:
        progress = False
        for si in range(nstages):
            st = stages[si]
            outs = sched.stage_outputs[si]
            # retire completions in order; all fanout channels need space
            while inflight[si] and inflight[si][0] <= cycle:
                if any(occupancy[ci] >= sched.channels[ci].depth for ci in outs):
                    stall_cycles += 1
                    break
                inflight[si].pop(0)
                produced[si] += 1
                if first_emit[si] < 0:
                    first_emit[si] = cycle
                last_emit[si] = cycle
                for ci in outs:
                    occupancy[ci] += 1
                    peaks[ci] = max(peaks[ci], occupancy[ci])
                progress = True
            # accept one row when the interval allows and inputs are ready
            if consumed[si] < st.rows and next_accept[si] <= cycle \
                    and len(inflight[si]) < st.pipeline_depth_cycles + 1:
                if st.barrier_after is not None and st.barrier_after >= 0 \
                        and produced[st.barrier_after] < stages[st.barrier_after].rows_out:
                    continue
                ins = sched.stage_inputs[si]
                if all(occupancy[ci] >= 1 for ci in ins):
                    for ci in ins:
                        occupancy[ci] -= 1
                    consumed[si] += 1
                    next_accept[si] = cycle + st.ii_cycles
                    if st.rows_out == st.rows:
                        inflight[si].append(cycle + st.pipeline_depth_cycles)
                    elif consumed[si] == st.rows:
                        # reducing stage (pool): single emission after the
                        # last row arrives
                        inflight[si].append(cycle + st.pipeline_depth_cycles)
                    progress = True
        if trace is not None:
            trace.append((cycle, list(occupancy)))
        quiet = 0 if progress else quiet + 1
        # with nothing in flight maturing later, a quiet cycle can never
        # unblock: the state is stuck for good
        stuck = quiet >= 1 and not any(
            f > cycle for fl in inflight for f in fl)
        if stuck or quiet > quiet_limit:
            full = [sched.channels[ci].name
                    for ci in range(len(sched.channels))
                    if occupancy[ci] >= sched.channels[ci].depth]
            raise DeadlockError(
                "pipeline deadlock: no token movement possible; "
                f"full channels: {', '.join(full) or 'none'}")
        cycle += 1

    total_latency = last_emit[-1]
    report = CycleReport(
        total_latency_cycles=total_latency,
        initiation_interval_cycles=analytic_interval(sched),
        latency_us=total_latency * sched.rc.clock_period_ns / 1000.0,
        stall_cycles=stall_cycles,
        stage_breakdown=[{
            "name": st.name, "ii": st.ii_cycles, "depth": st.pipeline_depth_cycles,
            "rows": st.rows, "first_emit": first_emit[si], "last_emit": last_emit[si],
            "multiply": st.is_multiply,
        } for si, st in enumerate(stages)],
        channel_peaks={sched.channels[ci].name: peaks[ci]
                       for ci in range(len(sched.channels))},
        tokens_produced={st.name: produced[si] for si, st in enumerate(stages)},
    )
    return output, report


@dataclass
class FifoCheckReport:
    flagged: list                 # channel names at capacity during the run
    minimal_depths: dict          # channel name -> smallest non-stalling depth
    baseline_latency: int


def _sim_latency_with_depths(sched: PipelineSchedule, x, depths: dict) -> int:
    probe = build_schedule(sched.qm, sched.rc, costs=sched.costs,
                           fifo_depth_overrides=depths, fifo_depth=10 ** 9)
    try:
        _, rep = simulate(probe, x)
    except DeadlockError:
        return 10 ** 9
    return rep.total_latency_cycles


def fifo_depth_check(sched: PipelineSchedule, x: np.ndarray,
                     report: CycleReport | None = None) -> FifoCheckReport:
    """Flag channels that ran at capacity and find, by re-simulation, the
    smallest depth for each that keeps latency at the unbounded-FIFO
    baseline (other channels held unbounded to isolate the effect)."""
    if report is None:
        _, report = simulate(sched, x)
    flagged = [ch.name for ci, ch in enumerate(sched.channels)
               if report.channel_peaks[ch.name] >= ch.depth]
    baseline = _sim_latency_with_depths(sched, x, {})
    minimal = {}
    for name in flagged:
        lo, hi = 1, max(2, 2 * sched.qm.graph.seq_len)
        while _sim_latency_with_depths(sched, x, {name: hi}) > baseline:
            hi *= 2
        while lo < hi:
            mid = (lo + hi) // 2
            if _sim_latency_with_depths(sched, x, {name: mid}) <= baseline:
                hi = mid
            else:
                lo = mid + 1
        minimal[name] = lo
    return FifoCheckReport(flagged=flagged, minimal_depths=minimal,
                           baseline_latency=baseline)
