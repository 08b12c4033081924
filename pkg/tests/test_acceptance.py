"""Acceptance suite: one test per exit criterion, each printing a
pass/fail line and enforcing its runtime budget.

Run with `pytest tests/test_acceptance.py -v -s` to see the lines.
"""
import itertools
import time
from contextlib import contextmanager

import numpy as np
import pytest

from fxflow.cli import auc, main
from fxflow.dataflow import ReuseConfig, build_schedule, simulate
from fxflow.fixedpoint import FixedFormat, FixedScalar, QTensor, dequantize, parse_format, quantize, qtensor_from_floats
from fxflow.kernels import (
    OpCounter,
    default_quant_config,
    mha_q_batch,
    mha_q_stream,
    qforward,
    quantize_model,
    softmax_legacy,
    softmax_restructured,
    stream_forward,
)
from fxflow.model import MHA, LayerNorm, ModelGraph, build_example_models, float_forward, float_layernorm
from fxflow.resources import dsp_per_multiply, estimate_resources

from bounds import layernorm_bound, softmax_legacy_bounds, softmax_restructured_bound
from bruteforce_attention import multi_head_attention
from modelgen import random_small_model


@contextmanager
def criterion(number: int, description: str, budget_s: float):
    t0 = time.monotonic()
    try:
        yield
    except Exception:
        print(f"ACCEPTANCE {number}: FAIL - {description}")
        raise
    elapsed = time.monotonic() - t0
    assert elapsed < budget_s, f"criterion {number} took {elapsed:.1f}s (budget {budget_s}s)"
    print(f"ACCEPTANCE {number}: PASS ({elapsed:.2f}s) - {description}")


EXAMPLES = build_example_models()


def test_criterion_1_fixed_point_example_format():
    with criterion(1, "ufixed<7,4> spans 0..15.875 step 0.125, exhaustive round-trip", 1.0):
        f = parse_format("ufixed<7,4>")
        assert f.min() == 0.0
        assert f.max() == 15.875
        assert f.step() == 0.125
        for raw in range(128):
            v = FixedScalar(raw, f)
            assert quantize(dequantize(v), f).raw == raw


def test_criterion_2_softmax_complexity_and_agreement():
    with criterion(2, "softmax lookups 10 vs 100 at k=10; variants within 2x LUT bound; "
                      "sums within k*(step+bound) of 1", 1.0):
        k = 10
        cfg = default_quant_config(FixedFormat(30, 6), seq_len=k)
        rng = np.random.default_rng(20)
        zf = rng.uniform(-1, 1, k)
        z = qtensor_from_floats(zf, cfg.activation_format)
        c_r, c_l = OpCounter(), OpCounter()
        out_r = softmax_restructured(z, cfg, c_r).to_floats()
        out_l = softmax_legacy(z, cfg, c_l).to_floats()
        assert c_r.exp_lookups == 10
        assert c_l.exp_lookups == 100
        b_r = softmax_restructured_bound(cfg, k)
        b_l = softmax_legacy_bounds(cfg, z.to_floats())
        assert np.all(np.abs(out_r - out_l) <= 2 * np.maximum(b_r, b_l))
        delta = cfg.activation_format.step() + b_r
        assert abs(out_r.sum() - 1.0) <= k * delta
        assert abs(out_l.sum() - 1.0) <= k * (cfg.activation_format.step() + float(b_l.max()))


def test_criterion_3_streaming_transparency():
    with criterion(3, "stream==batch and simulate==batch bit-exact: 200 random models "
                      "(shapes <= 8x8) plus all example models at R in {1,2,4}", 120.0):
        rng = np.random.default_rng(30)
        n_mha = 0
        for _ in range(200):
            g, x = random_small_model(rng)
            cfg = default_quant_config(FixedFormat(16, 6), seq_len=g.seq_len)
            qm = quantize_model(g, cfg)
            batch = qforward(qm, x)
            assert stream_forward(qm, x).bit_equal(batch)
            n_mha += any(isinstance(l, MHA) for l in g.layers)
            for r in (1, 2, 4):
                out, _ = simulate(build_schedule(qm, ReuseConfig(r)), x)
                assert out.bit_equal(batch)
        assert n_mha >= 50  # the random pool genuinely exercises attention
        for name, g in EXAMPLES.items():
            cfg = default_quant_config(FixedFormat(16, 6), seq_len=g.seq_len)
            qm = quantize_model(g, cfg)
            x = np.random.default_rng(31).uniform(-2, 2, (g.seq_len, g.input_dim))
            batch = qforward(qm, x)
            assert stream_forward(qm, x).bit_equal(batch)
            # the attention stage stream on its own, against the batch form
            from fxflow.kernels import QMHA
            mha_idx = next(i for i, l in enumerate(qm.layers) if isinstance(l, QMHA))
            _, outs = qforward(qm, x, return_all=True)
            mha_in = outs[mha_idx - 1]
            rows = [QTensor((mha_in.shape[1],), mha_in.mat[t].copy(), mha_in.format)
                    for t in range(g.seq_len)]
            streamed = np.stack([r.raw for r in
                                 mha_q_stream(iter(rows), qm.layers[mha_idx], cfg, g.seq_len)])
            assert np.array_equal(streamed, mha_q_batch(mha_in, qm.layers[mha_idx], cfg).mat)
            for r in (1, 2, 4):
                out, _ = simulate(build_schedule(qm, ReuseConfig(r)), x)
                assert out.bit_equal(batch)


def test_criterion_4_layernorm_moments():
    with criterion(4, "float layer-norm per-step moments within 1e-9; fixed within the "
                      "documented bound at 16 fractional bits", 10.0):
        rng = np.random.default_rng(40)
        d = 16
        x = rng.uniform(-3, 3, (6, d))
        layer = LayerNorm(gamma=np.ones(d), beta=np.zeros(d))
        out = float_layernorm(x, layer)
        assert np.abs(out.mean(axis=1)).max() < 1e-9
        assert np.abs(out.var(axis=1) - 1.0).max() < 1e-9
        cfg = default_quant_config(FixedFormat(22, 6), seq_len=6)  # 16 fractional bits
        g = ModelGraph("m", 6, d, [layer])
        qm = quantize_model(g, cfg)
        from fxflow.kernels import layernorm_q
        got = layernorm_q(qtensor_from_floats(x, cfg.activation_format),
                          qm.layers[0], cfg).to_floats()
        for r in range(6):
            assert np.abs(got[r] - out[r]).max() <= layernorm_bound(cfg, x[r], layer.gamma)


@pytest.mark.parametrize("name", ["engine", "btag", "gw"])
def test_criterion_5_precision_convergence(name, tmp_path):
    with criterion(5, f"sweep-bits[{name}]: agreement>=0.99 and AUC>=0.99 at 16 "
                      "fractional bits; err(16) <= err(6)", 120.0):
        out = tmp_path / f"{name}.csv"
        rc = main(["sweep-bits", "--model", name, "--data", "synthetic:100",
                   "--seed", "1", "--out", str(out)])
        assert rc == 0
        lines = out.read_text().strip().split("\n")
        assert lines[0] == "frac_bits,auc,max_abs_err,agreement"
        rows = {int(l.split(",")[0]): l.split(",") for l in lines[1:]}
        auc16 = float(rows[16][1])
        agree16 = float(rows[16][3])
        assert agree16 >= 0.99
        assert auc16 >= 0.99
        assert float(rows[16][2]) <= float(rows[6][2])


@pytest.mark.parametrize("name", ["engine", "btag", "gw"])
def test_criterion_6_reuse_trends(name, tmp_path):
    with criterion(6, f"sweep-reuse[{name}]: interval/latency strictly increase, DSP "
                      "strictly decreases, multiply-stage II doubles exactly", 60.0):
        out = tmp_path / f"{name}_reuse.csv"
        rc = main(["sweep-reuse", "--model", name, "--reuses", "1,2,4",
                   "--out", str(out)])
        assert rc == 0
        lines = out.read_text().strip().split("\n")
        cols = lines[0].split(",")
        rows = [dict(zip(cols, l.split(","))) for l in lines[1:]]
        interval = [int(r["interval_cycles"]) for r in rows]
        latency = [int(r["latency_cycles"]) for r in rows]
        dsp = [int(r["dsp"]) for r in rows]
        assert interval[0] < interval[1] < interval[2]
        assert latency[0] < latency[1] < latency[2]
        assert dsp[0] > dsp[1] > dsp[2]
        g = EXAMPLES[name]
        cfg = default_quant_config(FixedFormat(16, 6), seq_len=g.seq_len)
        qm = quantize_model(g, cfg)
        scheds = {r: build_schedule(qm, ReuseConfig(r)) for r in (1, 2, 4)}
        for s1, s2, s4 in zip(scheds[1].stages, scheds[2].stages, scheds[4].stages):
            if s1.is_multiply:
                assert s2.ii_cycles == 2 * s1.ii_cycles
                assert s4.ii_cycles == 2 * s2.ii_cycles


def test_criterion_7_dsp_width_step():
    with criterion(7, "crossing the DSP input width (18) exactly doubles per-multiply "
                      "DSP count at fixed M and R", 1.0):
        assert dsp_per_multiply(18, 18) == 1
        assert dsp_per_multiply(19, 18) == 2
        g = EXAMPLES["engine"]
        for r in (1, 2):
            rc = ReuseConfig(r)
            qm_lo = quantize_model(g, default_quant_config(FixedFormat(18, 6), seq_len=g.seq_len))
            qm_hi = quantize_model(g, default_quant_config(FixedFormat(19, 6), seq_len=g.seq_len))
            assert estimate_resources(qm_hi, rc).dsp == 2 * estimate_resources(qm_lo, rc).dsp


def test_criterion_8_oracle_equivalence():
    with criterion(8, "float reference matches a brute-force attention evaluation "
                      "within 1e-12 on a 3x2 single-head layer", 1.0):
        rng = np.random.default_rng(80)
        layer = MHA(heads=1, d_model=2, d_k=2,
                    w_q=rng.uniform(-1, 1, (1, 2, 2)), w_k=rng.uniform(-1, 1, (1, 2, 2)),
                    w_v=rng.uniform(-1, 1, (1, 2, 2)), w_o=rng.uniform(-1, 1, (2, 2)),
                    b_o=rng.uniform(-0.3, 0.3, 2))
        g = ModelGraph("m", 3, 2, [layer])
        x = rng.uniform(-1, 1, (3, 2))
        got = float_forward(g, x)
        want = multi_head_attention(
            x.tolist(),
            [(layer.w_q[0].tolist(), layer.w_k[0].tolist(), layer.w_v[0].tolist())],
            layer.w_o.tolist(), layer.b_o.tolist(), layer.d_k)
        assert np.abs(got - np.array(want)).max() < 1e-12


def test_criterion_9_auc_hand_case():
    with criterion(9, "AUC of scores [0.1,0.4,0.35,0.8] vs labels [0,0,1,1] is exactly "
                      "0.75 (pair enumeration)", 1.0):
        scores = [0.1, 0.4, 0.35, 0.8]
        labels = [0, 0, 1, 1]
        wins = pairs = 0.0
        for (sp, lp), (sn, ln) in itertools.product(zip(scores, labels), repeat=2):
            if lp == 1 and ln == 0:
                pairs += 1
                wins += 1.0 if sp > sn else (0.5 if sp == sn else 0.0)
        assert wins / pairs == 0.75
        assert auc(scores, labels) == 0.75
