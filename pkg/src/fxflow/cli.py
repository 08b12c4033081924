"""Command-line surface: inspect, run, sweep-bits, sweep-reuse, estimate.

Configuration precedence is CLI flag > config file (JSON) > built-in
default, applied field by field.  Exit codes: 0 on success, 2 for any
input/validation problem, 3 for an internal invariant violation.
"""
from __future__ import annotations

import argparse
import json
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from .data import DataError, Dataset, resolve_dataset
from .dataflow import DataflowError, ReuseConfig, build_schedule, simulate
from .fixedpoint import FixedFormat, FixedPointError, parse_format
from .kernels import QuantConfig, default_quant_config, qforward, quantize_model
from .lut import LutDomainError, LutSpec, dump_csv
from .model import (ModelError, ModelGraph, bundled_model_path, count_parameters,
                    float_forward, load_model, output_shapes)
from .resources import estimate_resources, pareto_sweep, rows_to_csv

EXIT_OK, EXIT_INPUT, EXIT_INTERNAL = 0, 2, 3


class InputError(Exception):
    pass


class InternalError(Exception):
    pass


CONFIG_DEFAULTS = {
    "model": None,
    "data": None,
    "activation_format": "fixed<16,6>",
    "weight_format": None,          # defaults to activation format
    "accumulator_format": None,     # defaults to 10 integer bits over activation fraction
    "reuse": 1,
    "clock_period_ns": 5.0,
    "softmax_variant": "restructured",
    "seed": 0,
    "fifo_depth": None,
    "lut": {},                      # per kind: {"table_size":..., "lo":..., "hi":...}
    "frac": None,                   # convenience: override fractional bits
    "int": 6,                       # integer bits used with --frac
}


def load_run_config(config_path: str | None, flag_values: dict) -> dict:
    resolved = dict(CONFIG_DEFAULTS)
    if config_path:
        p = Path(config_path)
        if not p.exists():
            raise InputError(f"config file not found: {p}")
        try:
            file_cfg = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise InputError(f"config parse error in {p}: line {e.lineno}: {e.msg}")
        unknown = set(file_cfg) - set(CONFIG_DEFAULTS)
        if unknown:
            raise InputError(f"unknown config fields: {sorted(unknown)}")
        resolved.update(file_cfg)
    for key, val in flag_values.items():
        if val is not None:
            resolved[key] = val
    return resolved


def quant_config_from(resolved: dict, seq_len: int) -> QuantConfig:
    if resolved.get("frac") is not None:
        ibits = int(resolved["int"])
        act = FixedFormat(ibits + int(resolved["frac"]), ibits)
        wgt = act
    else:
        act = parse_format(resolved["activation_format"])
        wgt = parse_format(resolved["weight_format"]) if resolved["weight_format"] else act
    acc = parse_format(resolved["accumulator_format"]) if resolved["accumulator_format"] else None
    cfg = default_quant_config(activation=act, weight=wgt, accumulator=acc,
                               seq_len=seq_len,
                               softmax_variant=resolved["softmax_variant"])
    for kind, over in (resolved.get("lut") or {}).items():
        if kind not in cfg.lut_specs:
            raise InputError(f"unknown LUT name {kind!r}")
        spec = cfg.lut_specs[kind]
        cfg.lut_specs[kind] = LutSpec(
            spec.kind,
            int(over.get("table_size", spec.table_size)),
            float(over.get("lo", spec.input_lo)),
            float(over.get("hi", spec.input_hi)),
            spec.entry_format)
    return cfg


def resolve_model(spec: str | None) -> ModelGraph:
    if not spec:
        raise InputError("no model given (use --model or a config file)")
    p = Path(spec)
    if p.exists():
        return load_model(p)
    bundled = bundled_model_path(spec)
    if bundled.exists():
        return load_model(bundled)
    raise InputError(f"model file not found: {spec}")


# ---------------------------------------------------------------------------
# AUC (rank-based, ties count one half)
# ---------------------------------------------------------------------------

def auc(scores, labels) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        warnings.warn("AUC undefined: only one class present")
        return float("nan")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0  # average rank, 1-based
        i = j + 1
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def macro_auc(outputs: np.ndarray, labels: np.ndarray, classes: int) -> float:
    """Macro-averaged one-vs-rest AUC; classes absent from the labels are
    skipped (NaN if none remain)."""
    per_class = []
    for c in range(classes):
        mask = (labels == c).astype(int)
        if mask.min() == mask.max():
            continue
        score = outputs[:, c] if outputs.ndim == 2 and outputs.shape[1] > 1 else outputs.reshape(-1)
        per_class.append(auc(score, mask))
    return float(np.mean(per_class)) if per_class else float("nan")


# ---------------------------------------------------------------------------
# Prediction helpers
# ---------------------------------------------------------------------------

def _scores_and_preds(outputs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Positive-class score and predicted class per sample; sigmoid scalars
    threshold at one half, otherwise argmax."""
    if outputs.ndim == 1 or outputs.shape[1] == 1:
        s = outputs.reshape(-1)
        return s, (s >= 0.5).astype(np.int64)
    return outputs[:, 1], outputs.argmax(axis=1)


def binary_or_macro_auc(outputs: np.ndarray, labels: np.ndarray) -> float:
    if outputs.ndim == 1 or outputs.shape[1] <= 2:
        scores, _ = _scores_and_preds(outputs)
        return auc(scores, (labels == 1).astype(int))
    return macro_auc(outputs, labels, outputs.shape[1])


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_inspect(args) -> int:
    resolved = load_run_config(args.config, _flags(args))
    g = resolve_model(resolved["model"])
    cfg = quant_config_from(resolved, g.seq_len)
    if args.dump_lut:
        _emit(dump_csv(cfg.table(args.dump_lut)), args.out)
        return EXIT_OK
    qm = quantize_model(g, cfg)
    sched = build_schedule(qm, ReuseConfig(resolved["reuse"], resolved["clock_period_ns"]),
                           fifo_depth=resolved["fifo_depth"])
    mults = {}
    for st in sched.stages:
        mults[st.layer_index] = mults.get(st.layer_index, 0) + st.mults_per_row * st.rows
    shapes = output_shapes(g)
    lines = [f"model {g.name}: seq_len={g.seq_len} input_dim={g.input_dim} "
             f"parameters={count_parameters(g)}"]
    lines.append(f"{'idx':>4} {'kind':<14} {'output':>10} {'params':>8} {'multiplies':>11} "
                 f"{'quant_err':>10}")
    for i, layer in enumerate(g.layers):
        p = _layer_params(layer)
        lines.append(f"{i:>4} {layer.kind:<14} {str(shapes[i]):>10} {p:>8} "
                     f"{mults.get(i, 0):>11} {qm.quant_errors[i]:>10.3g}")
    _emit("\n".join(lines) + "\n", args.out)
    return EXIT_OK


def _layer_params(layer) -> int:
    from .model import MHA, Dense, LayerNorm
    if isinstance(layer, Dense):
        return layer.w.size + layer.b.size
    if isinstance(layer, MHA):
        return (layer.w_q.size + layer.w_k.size + layer.w_v.size
                + layer.w_o.size + layer.b_o.size)
    if isinstance(layer, LayerNorm):
        return layer.gamma.size + layer.beta.size
    return 0


def _float_outputs(g: ModelGraph, ds: Dataset) -> np.ndarray:
    return np.stack([np.atleast_1d(float_forward(g, x)) for x in ds.samples])


def _fixed_outputs(qm, ds: Dataset) -> np.ndarray:
    return np.stack([np.atleast_1d(qforward(qm, x).to_floats()) for x in ds.samples])


def cmd_run(args) -> int:
    resolved = load_run_config(args.config, _flags(args))
    g = resolve_model(resolved["model"])
    if not resolved["data"]:
        raise InputError("run needs --data (a CSV path or synthetic[:N])")
    ds = resolve_dataset(resolved["data"], g, resolved["seed"])
    mode = args.mode or "float"
    lines = []
    report_text = ""
    if mode == "float":
        outputs = _float_outputs(g, ds)
    else:
        cfg = quant_config_from(resolved, g.seq_len)
        qm = quantize_model(g, cfg)
        if mode == "fixed":
            outputs = _fixed_outputs(qm, ds)
        elif mode == "sim":
            rc = ReuseConfig(resolved["reuse"], resolved["clock_period_ns"])
            sched = build_schedule(qm, rc, fifo_depth=resolved["fifo_depth"])
            outs = []
            rep = None
            for i, x in enumerate(ds.samples):
                trace = [] if (args.trace and i == 0) else None
                out, rep = simulate(sched, x, trace=trace)
                if trace is not None:
                    _write_trace(trace, sched, args.trace)
                batch = qforward(qm, x)
                if not out.bit_equal(batch):
                    raise InternalError("simulator output diverged from batch kernels")
                outs.append(np.atleast_1d(out.to_floats()))
            outputs = np.stack(outs)
            report_text = rep.table() + "\n" + rep.to_json() + "\n"
        else:
            raise InputError(f"unknown mode {mode!r}")
    scores, preds = _scores_and_preds(outputs)
    for i, (o, p) in enumerate(zip(outputs, preds)):
        vals = ",".join(format(v, ".8g") for v in np.atleast_1d(o))
        lines.append(f"{i},{vals},pred={p}")
    acc = float((preds == ds.labels).mean())
    lines.append(f"accuracy={acc:.4f}")
    a = binary_or_macro_auc(outputs, ds.labels)
    lines.append(f"auc={a:.6f}" if not math.isnan(a) else "auc=nan")
    text = "\n".join(lines) + "\n" + report_text
    _emit(text, args.out)
    return EXIT_OK


def _write_trace(trace: list, sched, path: str) -> None:
    names = [ch.name for ch in sched.channels]
    lines = [",".join(["cycle"] + names)]
    for cycle, occ in trace:
        lines.append(",".join([str(cycle)] + [str(v) for v in occ]))
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_sweep_bits(args) -> int:
    resolved = load_run_config(args.config, _flags(args))
    g = resolve_model(resolved["model"])
    if not resolved["data"]:
        raise InputError("sweep-bits needs --data (a CSV path or synthetic[:N])")
    ds = resolve_dataset(resolved["data"], g, resolved["seed"])
    fracs = [int(v) for v in (args.fracs or "4,6,8,10,12,16").split(",")]
    ibits = int(resolved["int"])
    fouts = _float_outputs(g, ds)
    _, fpred = _scores_and_preds(fouts)
    if len(np.unique(fpred)) < 2 and (fouts.ndim == 1 or fouts.shape[1] <= 2):
        warnings.warn("reference labels are single-class; AUC will be NaN")
    rows = []
    for frac in fracs:
        sub = dict(resolved)
        sub["frac"], sub["int"] = frac, ibits
        cfg = quant_config_from(sub, g.seq_len)
        qm = quantize_model(g, cfg)
        qouts = _fixed_outputs(qm, ds)
        _, qpred = _scores_and_preds(qouts)
        if fouts.ndim == 2 and fouts.shape[1] > 2:
            a = macro_auc(qouts, fpred, fouts.shape[1])
        else:
            qscore, _ = _scores_and_preds(qouts)
            a = auc(qscore, (fpred == 1).astype(int))
        rows.append({
            "frac_bits": frac,
            "auc": a,
            "max_abs_err": float(np.abs(qouts - fouts).max()),
            "agreement": float((qpred == fpred).mean()),
        })
    _emit(rows_to_csv(rows, ["frac_bits", "auc", "max_abs_err", "agreement"]), args.out)
    return EXIT_OK


def cmd_sweep_reuse(args) -> int:
    resolved = load_run_config(args.config, _flags(args))
    g = resolve_model(resolved["model"])
    reuses = [int(v) for v in (args.reuses or "1,2,4").split(",")]
    cfg = quant_config_from(resolved, g.seq_len)
    rows = pareto_sweep(g, [cfg], reuses, clock_period_ns=resolved["clock_period_ns"])
    cols = ["reuse", "interval_cycles", "latency_cycles", "latency_us",
            "dsp", "ff", "lut", "bram_blocks"]
    _emit(rows_to_csv(rows, cols), args.out)
    return EXIT_OK


def cmd_estimate(args) -> int:
    resolved = load_run_config(args.config, _flags(args))
    g = resolve_model(resolved["model"])
    cfg = quant_config_from(resolved, g.seq_len)
    qm = quantize_model(g, cfg)
    rc = ReuseConfig(resolved["reuse"], resolved["clock_period_ns"])
    rep = estimate_resources(qm, rc)
    if args.out and args.out.endswith(".json"):
        _emit(rep.to_json() + "\n", args.out)
    elif args.out and args.out.endswith(".csv"):
        _emit(rep.to_csv(), args.out)
    else:
        _emit(rep.table() + "\n", args.out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument plumbing
# ---------------------------------------------------------------------------

def _flags(args) -> dict:
    return {
        "model": args.model,
        "data": getattr(args, "data", None),
        "seed": args.seed,
        "reuse": args.reuse,
        "softmax_variant": args.softmax,
        "frac": args.frac,
        "int": args.int_bits,
        "clock_period_ns": getattr(args, "clock", None),
    }


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--model", help="model JSON path or bundled name (engine/btag/gw)")
    p.add_argument("--data", help="dataset CSV path or synthetic[:N]")
    p.add_argument("--out", help="write output to this path instead of stdout")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--mode", choices=["float", "fixed", "sim"], default=None)
    p.add_argument("--frac", type=int, default=None, help="fractional bits override")
    p.add_argument("--int", dest="int_bits", type=int, default=None, help="integer bits override")
    p.add_argument("--reuse", type=int, default=None)
    p.add_argument("--softmax", choices=["restructured", "legacy"], default=None)
    p.add_argument("--trace", help="write per-cycle FIFO occupancy CSV here (sim mode)")
    p.add_argument("--clock", type=float, default=None, help="clock period in ns")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fxflow", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("inspect", help="print the layer table for a model")
    _add_common(p)
    p.add_argument("--dump-lut", choices=["exp", "reciprocal", "inv_sqrt",
                                          "exp_legacy", "reciprocal_legacy"],
                   help="dump a lookup table as CSV instead")
    p.set_defaults(fn=cmd_inspect)
    p = sub.add_parser("run", help="run a model over a dataset")
    _add_common(p)
    p.set_defaults(fn=cmd_run)
    p = sub.add_parser("sweep-bits", help="fixed-vs-float agreement across fractional widths")
    _add_common(p)
    p.add_argument("--fracs", help="comma list of fractional widths (default 4,6,8,10,12,16)")
    p.set_defaults(fn=cmd_sweep_bits)
    p = sub.add_parser("sweep-reuse", help="latency/resource table across reuse factors")
    _add_common(p)
    p.add_argument("--reuses", help="comma list of reuse factors (default 1,2,4)")
    p.set_defaults(fn=cmd_sweep_reuse)
    p = sub.add_parser("estimate", help="per-layer resource estimates")
    _add_common(p)
    p.set_defaults(fn=cmd_estimate)
    return parser


_INPUT_ERRORS = (InputError, ModelError, DataError, FixedPointError,
                 LutDomainError, OSError, ValueError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except _INPUT_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except (InternalError, DataflowError, AssertionError) as e:
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
