"""Acceptance criteria, one test per criterion; each records a pass/fail line
printed in the terminal summary."""

import itertools
import statistics
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_RESULTS
from oracles import gsa_loop, tsa_loop
from transattunet.attention import GsaParams, SelfAwareAttention, TsaParams, gsa_attention_map, gsa_forward, saa_forward
from transattunet.attention import tsa_attention_map, tsa_forward
from transattunet.checkpoint import load_checkpoint
from transattunet.cli import main
from transattunet.data import SynthConfig, synth_generate
from transattunet.gradsuite import COMPOSITE_TOL, PRIMITIVE_TOL, run_suite
from transattunet.losses import LossConfig, combined_loss
from transattunet.metrics import ConfusionCounts, confusion, metrics
from transattunet.model import DecoderStageOutput, ModelConfig, msc_cascade, msc_dense, msc_residual
from transattunet.nn import ConvBlock, interp_matrix
from transattunet.optim import OptimConfig, desk_optim, lr_schedule
from transattunet.rng import Rng
from transattunet.tensor import Tensor
from transattunet.training import evaluate, model_from_checkpoint, predict_probs, train

SEEDS = (0, 1, 2)


def record(num, ok, detail):
    ACCEPTANCE_RESULTS.append((num, bool(ok), detail))
    assert ok, f"criterion {num}: {detail}"


def t64(a):
    return Tensor(np.asarray(a, dtype=np.float64))


# -- 1 ----------------------------------------------------------------------


def test_c01_gradient_suite():
    t0 = time.perf_counter()
    results = run_suite()
    elapsed = time.perf_counter() - t0
    failed = [r.name for r in results if not r.passed]
    prim = max(r.report.max_rel_error for r in results if r.kind == "primitive")
    comp = max(r.report.max_rel_error for r in results if r.kind == "composite")
    tols_ok = all(r.report.tol == (PRIMITIVE_TOL if r.kind == "primitive" else 1e-6 if "loss" in r.name else COMPOSITE_TOL) for r in results)
    has_model = any(r.name.startswith("model 1x1x16x16 depth 2") for r in results)
    ok = not failed and tols_ok and has_model and elapsed <= 300
    record(
        1,
        ok,
        f"{len(results) - len(failed)}/{len(results)} checks, max rel err primitive {prim:.1e} composite {comp:.1e}, {elapsed:.1f}s",
    )


# -- 2 ----------------------------------------------------------------------


def test_c02_attention_oracles():
    worst = 0.0
    for c, s, heads in itertools.product([8, 16], [2, 3, 4], [1, 8]):
        f = np.random.default_rng(c * 100 + s * 10 + heads).standard_normal((2, c, s, s))
        tsa = TsaParams(Rng(c + s + heads), c, s, s, heads).astype(np.float64)
        ref, ref_maps = tsa_loop(
            f, tsa.pos_enc.data, tsa.w_q.data, tsa.w_k.data, tsa.w_v.data, heads, tsa.out_proj.weight.data, tsa.out_proj.bias.data
        )
        worst = max(worst, np.abs(tsa_forward(t64(f), tsa).data - ref).max(), np.abs(tsa_attention_map(t64(f), tsa) - ref_maps).max())
        gsa = GsaParams(Rng(c + s), c).astype(np.float64)
        ref, ref_maps = gsa_loop(
            f, gsa.proj_reduce.weight.data, gsa.proj_reduce.bias.data, gsa.proj_full.weight.data, gsa.proj_full.bias.data
        )
        worst = max(worst, np.abs(gsa_forward(t64(f), gsa).data - ref).max(), np.abs(gsa_attention_map(t64(f), gsa) - ref_maps).max())
    record(2, worst <= 1e-5, f"12 configurations, max abs deviation {worst:.1e} (tol 1e-5)")


# -- 3 ----------------------------------------------------------------------


def test_c03_normalization():
    rng = np.random.default_rng(3)
    worst = 0.0
    for k in range(1000):
        c = (8, 16)[k % 2]
        s = (2, 3, 4)[k % 3]
        heads = (1, 8)[(k // 2) % 2]
        f = Tensor((rng.standard_normal((1, c, s, s)) * rng.uniform(0.1, 10)).astype(np.float32))
        a = tsa_attention_map(f, TsaParams(Rng(k), c, s, s, heads))
        b = gsa_attention_map(f, GsaParams(Rng(k), c))
        # A normalizes over its last axis, B over the source-position axis
        worst = max(worst, np.abs(a.sum(-1) - 1).max(), np.abs(b.sum(1) - 1).max())
    record(3, worst <= 1e-6, f"1000 inputs, max |row sum - 1| = {worst:.1e}")


# -- 4 ----------------------------------------------------------------------


def test_c04_fusion_identity():
    rng = np.random.default_rng(4)
    exact = 0
    for k in range(100):
        c, s = (8, 16, 32)[k % 3], (2, 3, 4)[k % 3]
        saa = SelfAwareAttention(Rng(k), c, s, s, heads=8)
        f = Tensor((rng.standard_normal((2, c, s, s)) * 5).astype(np.float32))
        exact += saa_forward(f, saa).data.tobytes() == f.data.tobytes()
    record(4, exact == 100, f"{exact}/100 inputs returned F_en bit-exactly with lambda1 = lambda2 = 0")


# -- 5 ----------------------------------------------------------------------


def _up(x, size):
    return interp_matrix(x.shape[2], size[0]) @ x @ interp_matrix(x.shape[3], size[1]).T


def test_c05_msc_structure():
    r = np.random.default_rng(5)
    feats = [r.standard_normal((2, 4, 2, 2)), r.standard_normal((2, 3, 4, 4)), r.standard_normal((2, 2, 8, 8))]
    stages = [DecoderStageOutput(i + 1, t64(a), 4 >> i) for i, a in enumerate(feats)]
    run = lambda blk, a: blk(t64(a)).data  # noqa: E731

    b2 = ConvBlock(Rng(1), 7, 3).astype(np.float64)
    bitwise = msc_dense(stages[:2], [b2]).data.tobytes() == msc_residual(stages[:2], [b2]).data.tobytes()

    cas = ConvBlock(Rng(2), 9, 2).astype(np.float64)
    ref_c = run(cas, np.concatenate([_up(f, (8, 8)) for f in feats], axis=1))
    err_c = np.abs(msc_cascade(stages, cas).data - ref_c).max()

    r2, r3 = ConvBlock(Rng(3), 7, 3).astype(np.float64), ConvBlock(Rng(4), 5, 2).astype(np.float64)
    g2 = run(r2, np.concatenate([feats[1], _up(feats[0], (4, 4))], axis=1))
    ref_r = run(r3, np.concatenate([feats[2], _up(g2, (8, 8))], axis=1))
    err_r = np.abs(msc_residual(stages, [r2, r3]).data - ref_r).max()

    d2, d3 = ConvBlock(Rng(5), 7, 3).astype(np.float64), ConvBlock(Rng(6), 9, 2).astype(np.float64)
    g2 = run(d2, np.concatenate([feats[1], _up(feats[0], (4, 4))], axis=1))
    ref_d = run(d3, np.concatenate([feats[2], _up(feats[0], (8, 8)), _up(g2, (8, 8))], axis=1))
    err_d = np.abs(msc_dense(stages, [d2, d3]).data - ref_d).max()

    worst = max(err_c, err_r, err_d)
    record(5, bitwise and worst <= 1e-6, f"2-stage dense == residual bitwise: {bitwise}; 3-stage max deviation {worst:.1e}")


# -- 6 ----------------------------------------------------------------------


def test_c06_metrics_oracle():
    y = np.zeros((4, 4), np.uint8)
    y[0, :3] = 1
    y[1, 0] = 1
    m = np.zeros((4, 4), np.uint8)
    m[0, :3] = 1
    m[3, 3] = 1
    c = confusion(m, y)
    rep = metrics(c)
    got = (rep.dice, rep.iou, rep.acc, rep.rec, rep.pre)
    counts_ok = (c.tp, c.fp, c.fn, c.tn) == (3, 1, 1, 11)
    rng = np.random.default_rng(6)
    worst = 0.0
    for tup in rng.integers(0, 10**6, (1000, 4)):
        r = metrics(ConfusionCounts(*map(int, tup)))
        worst = max(worst, abs(r.dice - 2 * r.iou / (1 + r.iou)))
    ok = counts_ok and got == (0.75, 0.6, 0.875, 0.75, 0.75) and worst <= 1e-9
    record(6, ok, f"example metrics {got}; Dice-IoU identity max error {worst:.1e} over 1000 tuples")


# -- 7 ----------------------------------------------------------------------


def test_c07_loss_anchors():
    cfg = LossConfig()
    y = (np.random.default_rng(7).uniform(size=(4, 1, 16, 16)) > 0.5).astype(np.float64)
    perfect = combined_loss(t64(y), t64(y)).item()
    half = combined_loss(t64([[0.5, 0.5]]), t64([[1.0, 0.0]])).item()
    defaults = (cfg.alpha, cfg.beta, cfg.epsilon) == (0.5, 0.5, 1e-6)
    ok = perfect <= 1e-6 and abs(half - 0.596574) <= 1e-5 and defaults
    record(7, ok, f"perfect {perfect:.2e}, half case {half:.6f}, defaults alpha/beta/eps ok: {defaults}")


# -- 8 ----------------------------------------------------------------------


def test_c08_schedule():
    got = [lr_schedule(e, OptimConfig()) for e in (0, 39, 40, 79, 80)]
    record(8, got == [1e-4, 1e-4, 1e-5, 1e-5, 1e-6], f"lr at epochs 0,39,40,79,80 = {got}")


# -- 9 and 10: synthetic end-to-end runs -------------------------------------

DATA_CFG = SynthConfig(size=(64, 64), kinds=("ellipse",), seed=0)


@pytest.fixture(scope="module")
def synthetic_runs():
    train_set = synth_generate(DATA_CFG, 16)
    held_out = synth_generate(DATA_CFG, 16, start=1000)
    out = {}
    for variant, overrides in (("full", {}), ("ablated", {"use_tsa": False, "use_gsa": False, "msc_mode": "none"})):
        rows = []
        for seed in SEEDS:
            cfg = ModelConfig(input_size=DATA_CFG.size, seed=seed, **overrides)
            t0 = time.perf_counter()
            res = train(cfg, desk_optim(), train_set)
            rows.append(
                {
                    "seed": seed,
                    "seconds": time.perf_counter() - t0,
                    "train_dice": evaluate(res.model, train_set).dice,
                    "held_dice": evaluate(res.model, held_out).dice,
                    "first_loss": res.history[0]["train_loss"],
                    "last_loss": res.history[-1]["train_loss"],
                }
            )
        out[variant] = rows
    return out


@pytest.mark.slow
def test_c09_synthetic_overfit(synthetic_runs):
    rows = synthetic_runs["full"]
    good = sum(r["train_dice"] >= 0.95 and r["held_dice"] >= 0.85 for r in rows)
    minutes = sum(r["seconds"] for r in rows) / 60
    epochs = desk_optim().epochs
    detail = ", ".join(f"seed {r['seed']}: train {r['train_dice']:.3f} held-out {r['held_dice']:.3f}" for r in rows)
    decreasing = all(r["last_loss"] < r["first_loss"] for r in rows)
    ok = good >= 2 and minutes <= 15 and epochs >= 60 and decreasing
    record(9, ok, f"{good}/3 seeds pass ({detail}); {epochs} epochs; {minutes:.1f} min")


@pytest.mark.slow
def test_c10_ablation_direction(synthetic_runs):
    full = statistics.median(r["held_dice"] for r in synthetic_runs["full"])
    ablated = statistics.median(r["held_dice"] for r in synthetic_runs["ablated"])
    record(10, full >= ablated - 0.01, f"median held-out DICE full {full:.4f} vs ablated {ablated:.4f}")


# -- 11 ---------------------------------------------------------------------


def test_c11_determinism_and_persistence(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"depth": 2, "base_channels": 8, "epochs": 3, "batch_size": 4}')
    data = tmp_path / "data"
    assert main(["synth", "--n", "10", "--size", "32", "--kinds", "ellipse", "--out", str(data)]) == 0
    csvs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert main(["train", "--config", str(cfg), "--data", str(data), "--seed", "7", "--out", str(out)]) == 0
        csvs.append((out / "metrics.csv").read_bytes())
    same_csv = csvs[0] == csvs[1]

    samples = synth_generate(SynthConfig(size=(32, 32), seed=9), 4)
    res = train(ModelConfig(depth=2, base_channels=8, input_size=(32, 32), seed=7), desk_optim(epochs=2), samples, (), tmp_path / "ck")
    reloaded = model_from_checkpoint(load_checkpoint(tmp_path / "ck" / "last.ckpt"))
    same_pred = all(a.tobytes() == b.tobytes() for a, b in zip(predict_probs(res.model, samples), predict_probs(reloaded, samples)))
    record(11, same_csv and same_pred, f"metrics CSV byte-identical: {same_csv}; reloaded predictions bit-identical: {same_pred}")
