import math

import numpy as np
import pytest

from ran.gradcheck import grad_check
from ran.ran_lstm import (DIRECTIONS, MIRROR, RanLstm, RanLstmConfig, build_ran_lstm_variant,
                          directional_scan, lstm2d_cell, ran_lstm_forward)
from ran.trainer import loss_closure


def random_cell_params(rng, d, h, scale=0.5):
    return {"W": rng.standard_normal((2 * h, 5 * h)) * scale,
            "U": rng.standard_normal((d, 5 * h)) * scale,
            "b": rng.standard_normal(5 * h) * scale}


def scalar_cell(p, hx, hy, cx, cy, params):
    """Gate-by-gate, element-by-element transcription of the 2D-LSTM cell."""
    H = len(hx)
    W, U, b = params["W"], params["U"], params["b"]
    hcat = list(hx) + list(hy)

    def gate(col):
        s = b[col]
        for k, v in enumerate(hcat):
            s += W[k, col] * v
        for k, v in enumerate(p):
            s += U[k, col] * v
        return s

    sig = lambda z: 1.0 / (1.0 + math.exp(-z))
    h_out, c_out = [], []
    for u in range(H):
        i = sig(gate(u))
        fx = sig(gate(H + u))
        fy = sig(gate(2 * H + u))
        g = math.tanh(gate(3 * H + u))
        o = sig(gate(4 * H + u))
        c = i * g + fx * cx[u] + fy * cy[u]
        c_out.append(c)
        h_out.append(o * c)
    return np.array(h_out), np.array(c_out)


def scalar_lstm_chain(xs, params, H):
    """1-D LSTM whose recurrence uses only the x half of W."""
    W, U, b = params["W"], params["U"], params["b"]
    h, c = np.zeros(H), np.zeros(H)
    hs = []
    for p in xs:
        pre = b + U.T @ p + W[:H].T @ h
        i, f, g, o = sig_v(pre[:H]), sig_v(pre[H:2 * H]), np.tanh(pre[3 * H:4 * H]), sig_v(pre[4 * H:])
        c = i * g + f * c
        h = o * c
        hs.append(h)
    return np.array(hs)


def sig_v(z):
    return 1.0 / (1.0 + np.exp(-z))


class TestCell:
    def test_all_zero(self):
        z = np.zeros(3)
        params = {"W": np.zeros((6, 15)), "U": np.zeros((2, 15)), "b": np.zeros(15)}
        h, c = lstm2d_cell(np.zeros(2), z, z, z, z, params)
        assert not h.any() and not c.any()

    def test_zero_predecessor_cells(self):
        rng = np.random.default_rng(0)
        params = random_cell_params(rng, 3, 2)
        p, hx, hy = rng.standard_normal(3), rng.standard_normal(2), rng.standard_normal(2)
        h, c = lstm2d_cell(p, hx, hy, np.zeros(2), np.zeros(2), params)
        pre = params["b"] + p @ params["U"] + np.concatenate([hx, hy]) @ params["W"]
        np.testing.assert_allclose(c, sig_v(pre[:2]) * np.tanh(pre[6:8]), rtol=1e-12)

    @pytest.mark.parametrize("seed", range(10))
    def test_scalar_oracle(self, seed):
        rng = np.random.default_rng(seed)
        params = random_cell_params(rng, 2, 2)
        args = [rng.standard_normal(2) for _ in range(5)]
        h, c = lstm2d_cell(*args, params)
        h_ref, c_ref = scalar_cell(*args, params)
        np.testing.assert_allclose(h, h_ref, atol=1e-12)
        np.testing.assert_allclose(c, c_ref, atol=1e-12)

    def test_shape_errors(self):
        rng = np.random.default_rng(0)
        params = random_cell_params(rng, 2, 2)
        with pytest.raises(ValueError, match="U shape"):
            lstm2d_cell(np.zeros(3), *[np.zeros(2)] * 4, params)
        with pytest.raises(ValueError, match="c_y"):
            lstm2d_cell(np.zeros(2), np.zeros(2), np.zeros(2), np.zeros(2), np.zeros(3), params)


class TestScan:
    def test_single_cell_all_directions_agree(self):
        rng = np.random.default_rng(1)
        params = random_cell_params(rng, 4, 3)
        grid = rng.standard_normal((1, 1, 4))
        outs = [directional_scan(grid, d, params) for d in DIRECTIONS]
        for h, c in outs[1:]:
            np.testing.assert_array_equal(h, outs[0][0])
            np.testing.assert_array_equal(c, outs[0][1])

    def test_row_reduces_to_1d_lstm(self):
        rng = np.random.default_rng(2)
        params = random_cell_params(rng, 3, 4)
        grid = rng.standard_normal((1, 7, 3))
        h, _ = directional_scan(grid, "dr", params)
        np.testing.assert_allclose(h[0], scalar_lstm_chain(grid[0], params, 4), rtol=1e-10, atol=1e-12)

    def test_column_reduces_to_1d_lstm_for_reverse_scan(self):
        rng = np.random.default_rng(3)
        params = random_cell_params(rng, 3, 2)
        # in a single column the vertical predecessor takes the role of x's
        cols = [0, 1, 4, 5, 2, 3, 6, 7, 8, 9]
        W = params["W"]
        swapped = {"W": np.concatenate([W[2:], W[:2]])[:, cols],
                   "U": params["U"][:, cols], "b": params["b"][cols]}
        grid = rng.standard_normal((6, 1, 3))
        h, _ = directional_scan(grid, "ul", params)
        ref = scalar_lstm_chain(grid[::-1, 0], swapped, 2)[::-1]
        np.testing.assert_allclose(h[:, 0], ref, rtol=1e-10, atol=1e-12)

    @pytest.mark.parametrize("shape", [(3, 3), (2, 5), (5, 2), (4, 4)])
    def test_schedules_bitwise_equal(self, shape):
        rng = np.random.default_rng(4)
        params = {k: v.astype(np.float32) for k, v in random_cell_params(rng, 5, 3).items()}
        grid = rng.standard_normal((*shape, 5)).astype(np.float32)
        for d in DIRECTIONS:
            hs, cs = directional_scan(grid, d, params, "sequential")
            hw, cw = directional_scan(grid, d, params, "wavefront")
            assert hs.tobytes() == hw.tobytes()
            assert cs.tobytes() == cw.tobytes()

    def test_causality(self):
        rng = np.random.default_rng(5)
        params = random_cell_params(rng, 3, 3)
        grid = rng.standard_normal((5, 6, 3))
        base, _ = directional_scan(grid, "dr", params)
        for (pi, pj) in [(0, 5), (4, 0), (2, 3), (4, 5)]:
            bumped = grid.copy()
            bumped[pi, pj] += 1.0
            h, _ = directional_scan(bumped, "dr", params)
            for i in range(5):
                for j in range(6):
                    same = np.array_equal(h[i, j], base[i, j])
                    assert same == (not (pi <= i and pj <= j)), (pi, pj, i, j)

    def test_gate_ranges(self):
        from ran.ran_lstm import _cell_math
        hidden = 7
        sig_cols = np.r_[0:3 * hidden, 4 * hidden:5 * hidden]
        cand_cols = np.r_[3 * hidden:4 * hidden]
        zeros = np.zeros((1, hidden))
        # saturating pre-activations stay inside the closed ranges
        act = _cell_math(np.linspace(-40, 40, 5 * hidden)[None], zeros, zeros, hidden)[0][0]
        assert np.all((act[sig_cols] >= 0) & (act[sig_cols] <= 1))
        assert np.all(np.abs(act[cand_cols]) <= 1)
        # moderate ones stay strictly inside
        act = _cell_math(np.random.default_rng(0).uniform(-5, 5, (50, 5 * hidden)), zeros, zeros, hidden)[0]
        assert np.all((act[:, sig_cols] > 0) & (act[:, sig_cols] < 1))
        assert np.all(np.abs(act[:, cand_cols]) < 1)


def lstm_store(config, seed=0, dtype=np.float64):
    return RanLstm(config).init_params(seed, dtype)


class TestModel:
    def test_shared_params_on_single_cell(self):
        cfg = RanLstmConfig(in_dim=3, hidden=4, layers=1)
        store = lstm_store(cfg)
        for d in DIRECTIONS[1:]:
            for p in "WUb":
                store.entries[f"l0.{d}.{p}"].value = store[f"l0.dr.{p}"].copy()
        grid = np.random.default_rng(0).standard_normal((1, 1, 3))
        h, _ = directional_scan(grid, "dr", {p: store[f"l0.dr.{p}"] for p in "WUb"})
        logits = ran_lstm_forward(grid, cfg, store)
        np.testing.assert_allclose(logits[0, 0], h[0, 0] @ store["head.W"] + store["head.b"], rtol=1e-12)

    @pytest.mark.parametrize("average_point", ["hidden", "logits"])
    def test_mirror_symmetry(self, average_point):
        cfg = RanLstmConfig(in_dim=4, hidden=3, layers=2, average_point=average_point)
        store = lstm_store(cfg, seed=3)
        grid = np.random.default_rng(1).standard_normal((4, 5, 4))
        base = ran_lstm_forward(grid, cfg, store)
        swapped = store.copy()
        for name in store.names():
            parts = name.split(".")
            for k, part in enumerate(parts):
                if part in MIRROR:
                    parts[k] = MIRROR[part]
            swapped.entries[".".join(parts)].value = store[name].copy()
        flipped = ran_lstm_forward(grid[::-1, ::-1], cfg, swapped)
        np.testing.assert_allclose(flipped, base[::-1, ::-1], rtol=1e-12, atol=1e-14)

    def test_output_shape(self):
        cfg = build_ran_lstm_variant("2L", 6, hidden=5)
        out = ran_lstm_forward(np.zeros((3, 4, 6)), cfg, lstm_store(cfg))
        assert out.shape == (3, 4, 2)

    def test_zero_params_uniform(self):
        cfg = build_ran_lstm_variant("1L", 3, hidden=2)
        store = RanLstm(cfg).init_params(0, zero=True)
        out = ran_lstm_forward(np.ones((2, 2, 3)), cfg, store)
        assert not out.any()

    def test_depth_mismatch(self):
        cfg = build_ran_lstm_variant("1L", 3, hidden=2)
        with pytest.raises(ValueError, match="layer 0"):
            ran_lstm_forward(np.ones((2, 2, 4)), cfg, lstm_store(cfg))

    def test_batch_invariant(self):
        cfg = build_ran_lstm_variant("2L", 4, hidden=3)
        store = lstm_store(cfg, dtype=np.float32)
        x = np.random.default_rng(2).standard_normal((5, 4, 4, 4)).astype(np.float32)
        full = ran_lstm_forward(x, cfg, store)
        for k in range(5):
            assert ran_lstm_forward(x[k], cfg, store).tobytes() == full[k].tobytes()

    @pytest.mark.parametrize("average_point", ["hidden", "logits"])
    def test_gradcheck(self, average_point):
        cfg = RanLstmConfig(in_dim=8, hidden=8, layers=2, average_point=average_point)
        model = RanLstm(cfg)
        rng = np.random.default_rng(4)
        x = rng.standard_normal((4, 4, 8))
        y = rng.integers(0, 2, (4, 4))
        report = grad_check(loss_closure(model, x, y), model.init_params(1, np.float64), 8, 1e-4)
        assert report.passed, report

    def test_input_gradient(self):
        cfg = RanLstmConfig(in_dim=3, hidden=2, layers=2)
        model = RanLstm(cfg)
        store = model.init_params(0, np.float64)
        rng = np.random.default_rng(0)
        x = rng.standard_normal((3, 3, 3))
        proj = rng.standard_normal((3, 3, 2))
        logits, cache = model.forward(store, x)
        dx = model.backward(store, proj, cache, need_input_grad=True)["input"]
        eps = 1e-6
        for idx in [(0, 0, 0), (1, 2, 1), (2, 1, 2)]:
            xp, xm = x.copy(), x.copy()
            xp[idx] += eps
            xm[idx] -= eps
            num = ((model.forward(store, xp)[0] - model.forward(store, xm)[0]) * proj).sum() / (2 * eps)
            assert dx[idx] == pytest.approx(num, rel=1e-6)


class TestVariants:
    def test_names(self):
        assert build_ran_lstm_variant("2L", 16).layers == 2
        assert build_ran_lstm_variant("1L", 16).layers == 1
        assert build_ran_lstm_variant("2L", 16).hidden == 32
        assert build_ran_lstm_variant("2L", 16, hidden=512).hidden == 512

    def test_unknown(self):
        with pytest.raises(ValueError, match="3L"):
            build_ran_lstm_variant("3L", 16)

    def test_bad_average_point(self):
        with pytest.raises(ValueError):
            RanLstmConfig(4, average_point="both")
