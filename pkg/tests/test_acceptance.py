"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s`` or as a script:
``python3 tests/test_acceptance.py [criterion numbers]``. The directional
ablation (criterion 8) trains 20 small networks; finished runs under
``runs/ablation`` with matching configs are reused.
"""

import math
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from sacseg import verify
from sacseg.ablation import AblationConfig, ordering_holds, run_ablation
from sacseg.cost import variant_table
from sacseg.data import DatasetSpec, dataset
from sacseg.losses import LossConfig, weighted_cross_entropy, multi_layer_loss, label_pyramid
from sacseg.network import ssgv3_21
from sacseg.projection import channel_stats, spatial_prior_scores
from sacseg.tensor import Tensor
from sacseg.train import train

ROOT = Path(__file__).resolve().parents[1]
ABLATION_DIR = Path(os.environ.get("SACSEG_ABLATION_DIR", ROOT / "runs" / "ablation"))
REPORT = []


def report(number: int, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
    REPORT.append(line)
    print(line, flush=True)


def _suite(number, cases, limit, t0):
    elapsed = time.perf_counter() - t0
    worst = max(cases, key=lambda c: c.error / c.tol if c.tol else (0 if c.error == 0 else math.inf))
    ok = all(c.passed for c in cases) and elapsed < limit
    report(number, ok, f"{sum(c.passed for c in cases)}/{len(cases)} checks, worst "
                       f"{worst.name!r} {worst.error:.2e} (tol {worst.tol:.0e}), {elapsed:.1f}s")
    return ok


def test_criterion_1_oracle_equivalence():
    t0 = time.perf_counter()
    cases = verify.oracle_suite(200)
    assert _suite(1, cases, 60, t0)


def test_criterion_2_conv_scheduling():
    t0 = time.perf_counter()
    assert _suite(2, verify.conv_suite(100), 60, t0)


def test_criterion_3_gradients():
    t0 = time.perf_counter()
    cases = verify.grad_suite(tol=1e-4)
    assert any("SAC" in c.name for c in cases)
    assert _suite(3, cases, 300, t0)


def test_criterion_4_identity_reductions():
    t0 = time.perf_counter()
    assert _suite(4, verify.reduction_suite(), 60, t0)


def test_criterion_5_projection_round_trip():
    t0 = time.perf_counter()
    assert _suite(5, verify.projection_suite(20), 60, t0)


def test_criterion_6_feature_distribution():
    t0 = time.perf_counter()
    images = [s.image for s in dataset(DatasetSpec(count=20, base_seed=0))]
    scores = spatial_prior_scores(channel_stats(images, []))
    rho, r = scores["row_z_spearman"], scores["col_x_pearson"]
    elapsed = time.perf_counter() - t0
    ok = rho <= -0.8 and abs(r) > 0.9 and elapsed < 60
    report(6, ok, f"row/mean-z Spearman {rho:.4f} (<= -0.8), column x-mean vs cos(2 pi p/w) "
                  f"Pearson {r:.4f} (|r| > 0.9), {elapsed:.1f}s")
    assert ok


def test_criterion_7_cost_accounting():
    t0 = time.perf_counter()
    t = {r["variant"]: r for r in variant_table(ssgv3_21(input_hw=(64, 2048)), ("S", "SK", "IS", "ISK"))}
    p = {v: t[v]["extra_params_pct"] for v in t}
    macs = t["ISK"]["extra_macs_pct"]
    elapsed = time.perf_counter() - t0
    ok = p["S"] < p["SK"] < p["IS"] < p["ISK"] and abs(macs - 24.8) <= 5 and elapsed < 60
    report(7, ok, "extra params % " + " < ".join(f"{v} {p[v]:.2f}" for v in ("S", "SK", "IS", "ISK"))
           + f"; ISK extra MACs {macs:.2f}% (24.8 +- 5), {elapsed:.1f}s")
    assert ok


@pytest.mark.slow
def test_criterion_8_directional_ablation():
    cfg = AblationConfig()
    with threadpool_limits(limits=1):
        rep = run_ablation(cfg, ABLATION_DIR)
    order = ordering_holds(rep)
    m = rep["median"]
    hours = rep["seconds"] / 3600
    ok = all(order.values()) and hours <= 2
    report(8, ok, f"median val mIoU ISK {m['sac-isk']:.4f}, S {m['sac-s']:.4f}, "
                  f"none {m['baseline']:.4f}, single-head {m['baseline-single-head']:.4f}; "
                  + ", ".join(f"{k} {'yes' if v else 'no'}" for k, v in order.items())
                  + f"; {hours:.2f} h")
    assert ok


def test_criterion_9_loss():
    cfg = LossConfig(num_classes=2, ignore_class=None, stage_weights=(1.0,))
    half = weighted_cross_entropy(Tensor(np.zeros((1, 2, 1, 1))), np.array([[[1]]]), [1, 1], cfg).item()
    logits = np.zeros((1, 2, 2, 2))
    logits[:, 0] = 50.0
    perfect = weighted_cross_entropy(Tensor(logits), np.zeros((1, 2, 2), int), [1, 1], cfg).item()

    rng = np.random.default_rng(9)
    labels = rng.integers(0, 6, size=(1, 8, 8))
    pyr = label_pyramid(labels)
    stage_logits = [Tensor(rng.normal(size=(1, 6, 8 // f, 8 // f))) for f in (1, 2, 4, 8, 8)]
    w = rng.uniform(0.5, 2.0, size=6)
    sw = rng.uniform(0.1, 2.0, size=5)
    base = LossConfig()
    parts = [weighted_cross_entropy(lg, y, w, base).item() for lg, y in zip(stage_logits, pyr)]
    combined = multi_layer_loss(stage_logits, pyr, w, LossConfig(stage_weights=tuple(sw))).item()
    linear = math.fsum(s * p for s, p in zip(sw, parts))
    doubled = multi_layer_loss(stage_logits, pyr, w, LossConfig(stage_weights=tuple(2 * sw))).item()
    ok = (abs(half - 0.6931471805599453) <= 1e-9 and perfect < 1e-9
          and abs(combined - linear) <= 1e-12 * abs(linear) and doubled == 2 * combined)
    report(9, ok, f"-ln 0.5 case {half:.12f}, perfect {perfect:.1e}, stage-weight linearity "
                  f"gap {abs(combined - linear):.1e}, doubling exact {doubled == 2 * combined}")
    assert ok


@pytest.mark.slow
def test_criterion_10_determinism():
    cfg = AblationConfig().train_config("baseline", seed=0, dtype="float64")
    with tempfile.TemporaryDirectory() as tmp, threadpool_limits(limits=1):
        train(cfg, Path(tmp) / "a")
        train(cfg, Path(tmp) / "b")
        a = (Path(tmp) / "a" / "metrics.csv").read_bytes()
        b = (Path(tmp) / "b" / "metrics.csv").read_bytes()
    ok = a == b and len(a.splitlines()) == cfg.epochs + 1
    report(10, ok, f"two float64 single-thread runs of the no-SAC baseline: metrics.csv "
                   f"{'bit-identical' if a == b else 'differ'} ({len(a)} bytes)")
    assert ok


if __name__ == "__main__":
    wanted = {int(a) for a in sys.argv[1:]}
    tests = [(int(name.split("_")[2]), fn) for name, fn in sorted(globals().items())
             if name.startswith("test_criterion_")]
    failed = 0
    for number, fn in sorted(tests):
        if wanted and number not in wanted:
            continue
        try:
            fn()
        except AssertionError:
            failed += 1
    sys.exit(1 if failed else 0)
