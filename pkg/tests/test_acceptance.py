"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The benchmark criteria share one module-scoped run over three seeds.
Run with ``pytest tests/test_acceptance.py -v``; the verdict lines are
printed in the terminal summary.
"""

import math
import time

import numpy as np
import pytest

from ran.encoder import EncoderConfig, PatchEncoder
from ran.evaluate import confusion_at, prf1
from ran.gradcheck import grad_check
from ran.grids import assemble_grids, balanced_sample, positive_cells
from ran.pipeline import desk_preset, run_benchmark
from ran.ran_cnn import RanCnn, build_ran_cnn_variant
from ran.ran_lstm import DIRECTIONS, RanLstm, RanLstmConfig, directional_scan, lstm2d_cell
from ran.trainer import Dataset, TrainConfig, grid_cross_entropy, loss_closure, lr_schedule, train

from fixtures import overfit_grids
from test_cli import TINY, tree
from test_ran_lstm import scalar_cell
from test_trainer import scalar_nll

SEEDS = (0, 1, 2)
MARGIN = 0.05


def test_gradient_correctness(verdict):
    start = time.perf_counter()
    worst, results = 0.0, []
    for size in (3, 4):
        rng = np.random.default_rng(size)
        y = rng.integers(0, 2, (2, size, size))
        cases = []
        enc = PatchEncoder(EncoderConfig())
        cases.append(("encoder", enc, loss_closure(enc, rng.random((size * size, 32, 32, 3)),
                                                   y[0].reshape(-1))))
        cnn = RanCnn(build_ran_cnn_variant("5L-D", 64))
        cases.append(("ran-cnn-5L-D", cnn, loss_closure(cnn, rng.standard_normal((2, size, size, 64)), y,
                                                         mode="train", dropout_seed=size)))
        lstm = RanLstm(RanLstmConfig(16, hidden=8, layers=2))
        cases.append(("ran-lstm-2L", lstm, loss_closure(lstm, rng.standard_normal((2, size, size, 16)), y)))
        for name, model, closure in cases:
            report = grad_check(closure, model.init_params(size, np.float64), 20, 1e-4, seed=size)
            results.append(f"{name}@{size}x{size}={report.max_rel_err:.1e}")
            worst = max(worst, report.max_rel_err)
            assert report.passed, (name, size, report)
    elapsed = time.perf_counter() - start
    verdict("gradient correctness, max rel err <= 1e-4, < 2 min", worst <= 1e-4 and elapsed < 120,
            f"worst {worst:.2e}, {elapsed:.0f}s; " + ", ".join(results))


def test_scalar_oracle_equivalence(verdict):
    worst_cell = worst_loss = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        d, h = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        params = {"W": rng.standard_normal((2 * h, 5 * h)), "U": rng.standard_normal((d, 5 * h)),
                  "b": rng.standard_normal(5 * h)}
        args = [rng.standard_normal(d)] + [rng.standard_normal(h) for _ in range(4)]
        got_h, got_c = lstm2d_cell(*args, params)
        ref_h, ref_c = scalar_cell(*args, params)
        worst_cell = max(worst_cell, np.abs(got_h - ref_h).max(), np.abs(got_c - ref_c).max())

        n, m = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        p1 = rng.random((n, m))
        probs = np.stack([1 - p1, p1], axis=-1)
        labels = rng.integers(0, 2, (n, m))
        mask = rng.random((n, m)) < 0.8
        mask[0, 0] = True
        worst_loss = max(worst_loss, abs(grid_cross_entropy(probs, labels, mask) - scalar_nll(probs, labels, mask)))
    verdict("scalar-oracle equivalence, 100 cases each, <= 1e-6", worst_cell <= 1e-6 and worst_loss <= 1e-6,
            f"cell {worst_cell:.1e}, loss {worst_loss:.1e}")


def test_schedule_equivalence(verdict, tmp_path):
    mismatches = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        params = {"W": rng.standard_normal((8, 20)).astype(np.float32) * 0.5,
                  "U": rng.standard_normal((5, 20)).astype(np.float32) * 0.5,
                  "b": rng.standard_normal(20).astype(np.float32) * 0.5}
        for n in range(1, 17):
            for m in range(1, 17):
                grid = rng.standard_normal((n, m, 5)).astype(np.float32)
                d = DIRECTIONS[(n + m + seed) % 4]
                hs, cs = directional_scan(grid, d, params, "sequential")
                hw, cw = directional_scan(grid, d, params, "wavefront")
                if hs.tobytes() != hw.tobytes() or cs.tobytes() != cw.tobytes():
                    mismatches.append((seed, n, m, d))
    from ran.cli import main
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY)
    one, eight = str(tmp_path / "t1"), str(tmp_path / "t8")
    assert main(["pipeline", "--config", str(cfg), "--out", one, "--threads", "1"]) == 0
    assert main(["pipeline", "--config", str(cfg), "--out", eight, "--threads", "8"]) == 0
    a, b = tree(one), tree(eight)
    differing = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    verdict("schedule equivalence 1x1..16x16 x 20 seeds, threads 1 vs 8 byte-identical",
            not mismatches and not differing,
            f"{len(mismatches)} scan mismatches, {len(differing)} differing files of {len(a)}")


@pytest.fixture(scope="module")
def benchmark():
    start = time.perf_counter()
    results = {}
    for seed in SEEDS:
        result = run_benchmark(desk_preset(seed), ("cnn-5L-D", "lstm-2L", "lstm-1L"))
        results[seed] = result.best_f1()
    return results, time.perf_counter() - start


def _mean(results, name):
    return float(np.mean([results[s][name] for s in SEEDS]))


def _per_seed(results, name):
    return "/".join(f"{results[s][name]:.3f}" for s in SEEDS)


def test_central_claim(verdict, benchmark):
    results, elapsed = benchmark
    patch = _mean(results, "patch-only")
    lstm = _mean(results, "lstm-2L")
    cnn = _mean(results, "cnn-5L-D")
    ok = lstm >= patch + MARGIN and cnn >= patch + MARGIN and elapsed < 1800
    verdict("context beats patch-only by >= 0.05 (mean of 3 seeds, < 30 min)", ok,
            f"patch-only {patch:.3f} [{_per_seed(results, 'patch-only')}], "
            f"RAN-CNN-5L-D {cnn:.3f} [{_per_seed(results, 'cnn-5L-D')}], "
            f"RAN-LSTM-2L {lstm:.3f} [{_per_seed(results, 'lstm-2L')}], {elapsed:.0f}s")


def test_lstm_depth_ordering(verdict, benchmark):
    results, _ = benchmark
    two, one = _mean(results, "lstm-2L"), _mean(results, "lstm-1L")
    verdict("RAN-LSTM-2L >= RAN-LSTM-1L (mean of 3 seeds)", two >= one,
            f"2L {two:.4f} [{_per_seed(results, 'lstm-2L')}], 1L {one:.4f} [{_per_seed(results, 'lstm-1L')}]")


def test_loss_calibration(verdict):
    rng = np.random.default_rng(0)
    uniform = grid_cross_entropy(np.full((8, 8, 2), 0.5), rng.integers(0, 2, (8, 8)))
    cfg = TrainConfig.for_model("ran-lstm")
    lr0, lr2 = lr_schedule(0, cfg), lr_schedule(2, cfg)
    ok = abs(uniform - math.log(2)) <= 1e-6 and lr0 == 1e-4 and lr2 == 5e-5
    verdict("uniform loss = ln 2, lr(0) = 1e-4, lr(2) = 5e-5", ok,
            f"loss {uniform:.9f}, lr0 {lr0!r}, lr2 {lr2!r}")


def test_metrics_oracle(verdict):
    rng = np.random.default_rng(0)
    probs = rng.random(10_000)
    labels = rng.integers(0, 2, 10_000)
    mask = rng.random(10_000) < 0.9
    bad = []
    for t in np.linspace(0, 1, 21):
        tp = fp = fn = tn = 0
        for p, y, m in zip(probs, labels, mask):
            if m:
                pos = p >= t
                tp += pos and y == 1
                fp += pos and y == 0
                fn += (not pos) and y == 1
                tn += (not pos) and y == 0
        got = confusion_at(probs, labels, mask, t)
        if got != (tp, fp, fn, tn):
            bad.append(("counts", t))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        if any(abs(a - b) > 1e-9 for a, b in zip(prf1(*got[:3]), (precision, recall, f1))):
            bad.append(("ratios", t))
    example = prf1(2, 1, 1)[2]
    verdict("metrics match brute force on 10k cells; TP=2,FP=1,FN=1 gives F1=2/3",
            not bad and abs(example - 2 / 3) <= 1e-12, f"{len(bad)} mismatches, F1 {example:.6f}")


def test_overfit_capacity(verdict):
    x, y, _ = overfit_grids()
    model = RanLstm(RanLstmConfig(8, hidden=16, layers=1))
    cfg = TrainConfig(lr=1e-2, lr_decay=1.0, epochs=200, batch_size=10, seed=0)
    losses = [row["train_loss"] for row in train(model, Dataset(x, y), cfg).log]
    below = next((k for k, v in enumerate(losses) if v < 0.05), None)
    verdict("RAN-LSTM-1L (H=16) training loss < 0.05 on 50 grids within 200 epochs", below is not None,
            f"first below at epoch {below}, final {losses[-1]:.2e}")


def test_balanced_sampler(verdict):
    coords = np.array([(0, c) for c in range(110)])
    labels = np.r_[np.ones(10, int), np.zeros(100, int)]
    pairs = assemble_grids(coords, np.ones((110, 1)), labels, 1, 1, 1, "s")
    out = balanced_sample(pairs, 3)
    pos = sum(positive_cells(p) > 0 for p in out)
    again = [g.origin for g, _ in balanced_sample(pairs, 3)]
    ok = len(out) == 20 and pos == 10 and again == [g.origin for g, _ in out]
    verdict("balanced sampler: 10 positive + 10 negative, deterministic per seed", ok,
            f"{pos} positive, {len(out) - pos} negative")
