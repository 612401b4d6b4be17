"""Four-directional 2D-LSTM context aggregator.

Each direction scans the grid from one corner to the opposite one.  A cell
reads the hidden and cell states of its horizontal ("x") and vertical ("y")
predecessors on the side of the starting corner; off-grid predecessors are
zero.  Directions are named by travel: ``dr`` starts top-left, ``dl``
top-right, ``ur`` bottom-left, ``ul`` bottom-right.

Internally every direction is run as a ``dr`` scan on a flipped copy of the
grid ("its frame"), which lets all four share one vectorised loop.

Per direction and layer the gate parameters are fused:

* ``W`` (2H, 5H): acts on the concatenation ``[h_x, h_y]`` (x first)
* ``U`` (K, 5H): acts on the cell input
* ``b`` (5H,)

with gate columns ordered ``[i | f_x | f_y | c~ | o]``.  The cell is::

    i = sigm(.)   f_x, f_y = sigm(.)   c~ = tanh(.)   o = sigm(.)
    c = i*c~ + f_x*c_x + f_y*c_y
    h = o*c
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import tensor as T
from .params import ParamStore, check_shapes, rng_for

DIRECTIONS = ("dr", "dl", "ur", "ul")
_FLIPS = {"dr": (False, False), "dl": (False, True), "ur": (True, False), "ul": (True, True)}
MIRROR = {"dr": "ul", "ul": "dr", "dl": "ur", "ur": "dl"}
SCHEDULES = ("sequential", "wavefront")
AVERAGE_POINTS = ("hidden", "logits")


@dataclass(frozen=True)
class RanLstmConfig:
    in_dim: int
    hidden: int = 32
    layers: int = 2
    class_count: int = 2
    average_point: str = "hidden"

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("RAN-LSTM needs at least one 2D-LSTM layer")
        if self.average_point not in AVERAGE_POINTS:
            raise ValueError(f"average_point must be one of {AVERAGE_POINTS}, got {self.average_point!r}")


LSTM_VARIANTS = {"1L": 1, "2L": 2}


def build_ran_lstm_variant(name, in_dim, hidden=32, average_point="hidden"):
    if name not in LSTM_VARIANTS:
        raise ValueError(f"unknown RAN-LSTM variant {name!r}; expected one of {sorted(LSTM_VARIANTS)}")
    return RanLstmConfig(in_dim, hidden, LSTM_VARIANTS[name], 2, average_point)


def param_shapes(config):
    h = config.hidden
    shapes = {}
    for layer in range(config.layers):
        k = config.in_dim if layer == 0 else h
        for d in DIRECTIONS:
            shapes[f"l{layer}.{d}.W"] = (2 * h, 5 * h)
            shapes[f"l{layer}.{d}.U"] = (k, 5 * h)
            shapes[f"l{layer}.{d}.b"] = (5 * h,)
    if config.average_point == "hidden":
        shapes["head.W"] = (h, config.class_count)
        shapes["head.b"] = (config.class_count,)
    else:
        for d in DIRECTIONS:
            shapes[f"head.{d}.W"] = (h, config.class_count)
            shapes[f"head.{d}.b"] = (config.class_count,)
    return shapes


def split_gates(w, hidden):
    """Views of a fused ``(…, 5H)`` block as ``(i, f_x, f_y, c~, o)``."""
    return tuple(w[..., k * hidden:(k + 1) * hidden] for k in range(5))


# --------------------------------------------------------------------------
# frames
# --------------------------------------------------------------------------

def to_frame(x, direction):
    """Flip ``(…, N, M, K)`` so that ``direction`` becomes a top-left scan.

    Flips are involutions, so the same call maps frame outputs back.
    """
    flip_rows, flip_cols = _FLIPS[direction]
    if flip_rows:
        x = x[..., ::-1, :, :]
    if flip_cols:
        x = x[..., :, ::-1, :]
    return x


def to_frames(x):
    return np.stack([to_frame(x, d) for d in DIRECTIONS])


def from_frames(xf):
    return np.stack([to_frame(xf[k], d) for k, d in enumerate(DIRECTIONS)])


# --------------------------------------------------------------------------
# cell
# --------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _gate_affine(hidden, dtype):
    """Per-column (scale, alpha, beta) turning one tanh into sigm/tanh gates.

    sigm(z) = 0.5 + 0.5*tanh(0.5*z); the candidate block uses tanh(z) as is.
    """
    dt = np.dtype(dtype)
    scale = np.full(5 * hidden, 0.5, dt)
    alpha = np.full(5 * hidden, 0.5, dt)
    beta = np.full(5 * hidden, 0.5, dt)
    scale[3 * hidden:4 * hidden] = 1.0
    alpha[3 * hidden:4 * hidden] = 1.0
    beta[3 * hidden:4 * hidden] = 0.0
    return scale, alpha, beta


def _cell_math(pre, cx, cy, hidden):
    scale, alpha, beta = _gate_affine(hidden, pre.dtype.str)
    act = np.tanh(pre * scale) * alpha + beta
    i, fx, fy, g, o = split_gates(act, hidden)
    c = i * g + fx * cx + fy * cy
    h = o * c
    return act, c, h


def lstm2d_cell(p, h_x, h_y, c_x, c_y, params_d):
    """One 2D-LSTM cell update; ``params_d`` holds fused ``W``, ``U``, ``b``.

    Returns ``(h, c)``.  Leading batch axes are allowed.
    """
    W, U, b = params_d["W"], params_d["U"], params_d["b"]
    hidden = h_x.shape[-1]
    if W.shape != (2 * hidden, 5 * hidden):
        raise T.ShapeError(f"lstm2d_cell: W shape {W.shape}, expected {(2 * hidden, 5 * hidden)}")
    if U.shape != (p.shape[-1], 5 * hidden):
        raise T.ShapeError(f"lstm2d_cell: U shape {U.shape}, expected {(p.shape[-1], 5 * hidden)}")
    for name, arr in (("h_y", h_y), ("c_x", c_x), ("c_y", c_y)):
        if arr.shape[-1] != hidden:
            raise T.ShapeError(f"lstm2d_cell: {name} width {arr.shape[-1]} != hidden {hidden}")
    a = T.rowwise_matmul(p, U) + b
    pre = a + T.rowwise_matmul(np.concatenate([h_x, h_y], axis=-1), W)
    _, c, h = _cell_math(pre, c_x, c_y, hidden)
    return h, c


# --------------------------------------------------------------------------
# scan
# --------------------------------------------------------------------------

@lru_cache(maxsize=None)
def _diagonals(n, m):
    out = []
    for k in range(n + m - 1):
        rows = np.arange(max(0, k - m + 1), min(k, n - 1) + 1)
        out.append((rows, k - rows))
    return tuple(out)


@lru_cache(maxsize=None)
def _row_major(n, m):
    return tuple((np.array([i]), np.array([j])) for i in range(n) for j in range(m))


def _scan(a, W, schedule):
    """Top-left scan over ``a`` (Dn, B, N, M, 5H) of input pre-activations.

    Returns padded hidden/cell states (Dn, B, N+1, M+1, H), whose row 0 and
    column 0 are the zero off-grid predecessors, and the gate activations.
    """
    if schedule not in SCHEDULES:
        raise ValueError(f"schedule must be one of {SCHEDULES}, got {schedule!r}")
    dn, b, n, m, g5 = a.shape
    hidden = g5 // 5
    hp = np.zeros((dn, b, n + 1, m + 1, hidden), dtype=a.dtype)
    cp = np.zeros_like(hp)
    act = np.empty_like(a)
    wb = W[:, None, None]
    order = _diagonals(n, m) if schedule == "wavefront" else _row_major(n, m)
    for rows, cols in order:
        r1, c1 = rows + 1, cols + 1
        hcat = np.concatenate([hp[:, :, r1, cols], hp[:, :, rows, c1]], axis=-1)
        pre = a[:, :, rows, cols] + T.rowwise_matmul(hcat, wb)
        gates, c, h = _cell_math(pre, cp[:, :, r1, cols], cp[:, :, rows, c1], hidden)
        act[:, :, rows, cols] = gates
        cp[:, :, r1, c1] = c
        hp[:, :, r1, c1] = h
    return hp, cp, act


def _scan_backward(dh, hp, cp, act, W):
    """Reverse wavefront pass.  Returns ``(d_pre (Dn,B,N,M,5H), dW)``."""
    dn, b, n, m, g5 = act.shape
    hidden = g5 // 5
    dhp = np.zeros_like(hp)
    dhp[:, :, 1:, 1:] = dh
    dcp = np.zeros_like(cp)
    dpre = np.empty_like(act)
    wt = np.swapaxes(W, 1, 2)[:, None]
    for rows, cols in reversed(_diagonals(n, m)):
        r1, c1 = rows + 1, cols + 1
        gates = act[:, :, rows, cols]
        i, fx, fy, g, o = split_gates(gates, hidden)
        dh_cell = dhp[:, :, r1, c1]
        c = cp[:, :, r1, c1]
        dc = dcp[:, :, r1, c1] + dh_cell * o
        cx = cp[:, :, r1, cols]
        cy = cp[:, :, rows, c1]
        dcp[:, :, r1, cols] += dc * fx
        dcp[:, :, rows, c1] += dc * fy
        dp = np.concatenate([
            dc * g * i * (1 - i),
            dc * cx * fx * (1 - fx),
            dc * cy * fy * (1 - fy),
            dc * i * (1 - g * g),
            dh_cell * c * o * (1 - o),
        ], axis=-1)
        dpre[:, :, rows, cols] = dp
        dhcat = dp @ wt
        dhp[:, :, r1, cols] += dhcat[..., :hidden]
        dhp[:, :, rows, c1] += dhcat[..., hidden:]
    hcat = np.concatenate([hp[:, :, 1:, :-1], hp[:, :, :-1, 1:]], axis=-1)
    dW = np.swapaxes(hcat.reshape(dn, -1, 2 * hidden), 1, 2) @ dpre.reshape(dn, -1, g5)
    return dpre, dW


def _layer_forward(xf, U, b, W, schedule):
    a = T.rowwise_matmul(xf, U[:, None, None, None]) + b[:, None, None, None]
    hp, cp, act = _scan(a, W, schedule)
    return hp[:, :, 1:, 1:], (xf, U, W, hp, cp, act)


def _layer_backward(dh, cache):
    xf, U, W, hp, cp, act = cache
    dpre, dW = _scan_backward(dh, hp, cp, act, W)
    dn, k = U.shape[0], U.shape[1]
    d2 = dpre.reshape(dn, -1, dpre.shape[-1])
    dU = np.swapaxes(xf.reshape(dn, -1, k), 1, 2) @ d2
    db = d2.sum(axis=1)
    dxf = dpre @ np.swapaxes(U, 1, 2)[:, None, None]
    return dxf, dU, db, dW


def directional_scan(grid, direction, params_d, schedule="wavefront"):
    """Run one direction over ``grid`` ((N, M, D) or (B, N, M, D)).

    Returns ``(h, c)`` in the grid's own orientation.
    """
    if direction not in _FLIPS:
        raise ValueError(f"unknown direction {direction!r}; expected one of {DIRECTIONS}")
    x = grid if isinstance(grid, np.ndarray) else np.asarray(getattr(grid, "data", grid))
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    W, U, b = params_d["W"], params_d["U"], params_d["b"]
    x = x.astype(W.dtype)
    xf = np.ascontiguousarray(to_frame(x, direction))[None]
    h, cache = _layer_forward(xf, U[None], b[None], W[None], schedule)
    cp = cache[4]
    h = to_frame(h[0], direction)
    c = to_frame(cp[0, :, 1:, 1:], direction)
    if squeeze:
        h, c = h[0], c[0]
    return np.ascontiguousarray(h), np.ascontiguousarray(c)


# --------------------------------------------------------------------------
# model
# --------------------------------------------------------------------------

class RanLstm:
    kind = "ran-lstm"

    def __init__(self, config, schedule="wavefront"):
        self.config = config
        self.schedule = schedule

    def init_params(self, seed, dtype=np.float32, zero=False):
        rng = rng_for(seed, "ran_lstm.init")
        store = ParamStore(seed)
        for name, shape in param_shapes(self.config).items():
            if zero or name.endswith(".b"):
                store.add(name, np.zeros(shape, dtype))
            else:
                store.add(name, T.glorot_uniform(rng, shape, shape[0], shape[1], dtype))
        return store

    def check(self, params):
        check_shapes(params, param_shapes(self.config))

    def _stacked(self, params, layer):
        return tuple(np.stack([params[f"l{layer}.{d}.{p}"] for d in DIRECTIONS]) for p in "UbW")

    def forward(self, params, x, mode="infer", rng=None):
        cfg = self.config
        squeeze = np.ndim(x) == 3
        x = np.asarray(x, dtype=params.dtype)
        if squeeze:
            x = x[None]
        if x.shape[-1] != cfg.in_dim:
            raise T.ShapeError(f"RAN-LSTM layer 0: grid depth {x.shape[-1]} != input width {cfg.in_dim}")
        xf = to_frames(x)
        caches = []
        y = None
        for layer in range(cfg.layers):
            U, b, W = self._stacked(params, layer)
            h, cache = _layer_forward(xf, U, b, W, self.schedule)
            caches.append(cache)
            if cfg.average_point == "hidden":
                y = from_frames(h).mean(axis=0)
                if layer + 1 < cfg.layers:
                    xf = to_frames(y)
            else:
                xf = np.ascontiguousarray(h)
        if cfg.average_point == "hidden":
            logits, c_head = T.dense(y, params["head.W"], params["head.b"])
        else:
            hw = np.stack([params[f"head.{d}.W"] for d in DIRECTIONS])
            hb = np.stack([params[f"head.{d}.b"] for d in DIRECTIONS])
            per_dir = T.rowwise_matmul(xf, hw[:, None, None, None]) + hb[:, None, None, None]
            logits = from_frames(per_dir).mean(axis=0)
            c_head = (xf, hw)
        cache = (caches, c_head, squeeze)
        return (logits[0] if squeeze else logits), cache

    def backward(self, params, dlogits, cache, need_input_grad=False):
        cfg = self.config
        caches, c_head, squeeze = cache
        if squeeze:
            dlogits = dlogits[None]
        grads = {}
        quarter = dlogits.dtype.type(0.25)
        if cfg.average_point == "hidden":
            dy, grads["head.W"], grads["head.b"] = T.dense_backward(dlogits, c_head)
            dhf = to_frames(dy * quarter)
        else:
            xf, hw = c_head
            dper = to_frames(dlogits * quarter)
            c = hw.shape[-1]
            for k, d in enumerate(DIRECTIONS):
                grads[f"head.{d}.W"] = xf[k].reshape(-1, hw.shape[1]).T @ dper[k].reshape(-1, c)
                grads[f"head.{d}.b"] = dper[k].reshape(-1, c).sum(axis=0)
            dhf = dper @ np.swapaxes(hw, 1, 2)[:, None, None]
        for layer in reversed(range(cfg.layers)):
            dxf, dU, db, dW = _layer_backward(dhf, caches[layer])
            for k, d in enumerate(DIRECTIONS):
                grads[f"l{layer}.{d}.U"] = dU[k]
                grads[f"l{layer}.{d}.b"] = db[k]
                grads[f"l{layer}.{d}.W"] = dW[k]
            if cfg.average_point == "hidden":
                dx = from_frames(dxf).sum(axis=0)
                if layer > 0:
                    dhf = to_frames(dx * quarter)
            else:
                dhf = dxf
                dx = None
        if need_input_grad:
            if dx is None:
                dx = from_frames(dxf).sum(axis=0)
            grads["input"] = dx[0] if squeeze else dx
        return grads


def ran_lstm_forward(grid, config, params, mode="infer", schedule="wavefront"):
    data = grid if isinstance(grid, np.ndarray) else getattr(grid, "data", grid)
    return RanLstm(config, schedule).forward(params, data, mode)[0]
