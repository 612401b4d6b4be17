"""Convolutional context aggregator over an N x M x D feature grid.

Stacked same-size 3x3 convolutions with ReLU; the last ``dropout_on_last_k``
of them are followed by dropout.  A 1x1 convolution maps the final feature
maps to class logits, so the output keeps the grid's N x M extent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .params import ParamStore, check_shapes, rng_for

DEFAULT_WIDTHS = (128, 128, 64, 64, 64)


@dataclass(frozen=True)
class RanCnnConfig:
    in_dim: int
    widths: tuple = DEFAULT_WIDTHS
    dropout_rate: float = 0.5
    dropout_on_last_k: int = 3
    class_count: int = 2

    def __post_init__(self):
        if len(self.widths) < 1:
            raise ValueError("RAN-CNN needs at least one conv layer")
        if not 0 <= self.dropout_on_last_k <= len(self.widths):
            raise ValueError(
                f"dropout_on_last_k={self.dropout_on_last_k} exceeds layer count {len(self.widths)}")


CNN_VARIANTS = {
    "3L": dict(layers=3, dropout_on_last_k=0),
    "5L": dict(layers=5, dropout_on_last_k=0),
    "5L-D": dict(layers=5, dropout_on_last_k=3),
}


def build_ran_cnn_variant(name, in_dim, widths=DEFAULT_WIDTHS, dropout_rate=0.5):
    if name not in CNN_VARIANTS:
        raise ValueError(f"unknown RAN-CNN variant {name!r}; expected one of {sorted(CNN_VARIANTS)}")
    spec = CNN_VARIANTS[name]
    layers = spec["layers"]
    widths = tuple(widths)
    if len(widths) < layers:
        widths = widths + (widths[-1],) * (layers - len(widths))
    return RanCnnConfig(in_dim, widths[:layers], dropout_rate, spec["dropout_on_last_k"])


def param_shapes(config):
    shapes = {}
    cin = config.in_dim
    for k, w in enumerate(config.widths):
        shapes[f"conv{k}.W"] = (3, 3, cin, w)
        shapes[f"conv{k}.b"] = (w,)
        cin = w
    shapes["head.W"] = (cin, config.class_count)
    shapes["head.b"] = (config.class_count,)
    return shapes


class RanCnn:
    kind = "ran-cnn"

    def __init__(self, config):
        self.config = config

    def init_params(self, seed, dtype=np.float32, zero=False):
        rng = rng_for(seed, "ran_cnn.init")
        store = ParamStore(seed)
        for name, shape in param_shapes(self.config).items():
            if zero or name.endswith(".b"):
                store.add(name, np.zeros(shape, dtype))
            elif len(shape) == 4:
                store.add(name, T.glorot_uniform(rng, shape, 9 * shape[2], 9 * shape[3], dtype))
            else:
                store.add(name, T.glorot_uniform(rng, shape, shape[0], shape[1], dtype))
        return store

    def check(self, params):
        cin = self.config.in_dim
        for k, w in enumerate(self.config.widths):
            got = params[f"conv{k}.W"].shape if f"conv{k}.W" in params else None
            if got != (3, 3, cin, w):
                raise T.ShapeError(f"RAN-CNN layer {k}: kernel shape {got}, expected {(3, 3, cin, w)}")
            cin = w
        check_shapes(params, param_shapes(self.config))

    def forward(self, params, x, mode="infer", rng=None):
        squeeze = x.ndim == 3
        x = np.asarray(x, dtype=params.dtype)
        if squeeze:
            x = x[None]
        if x.shape[-1] != self.config.in_dim:
            raise T.ShapeError(
                f"RAN-CNN layer 0: grid depth {x.shape[-1]} != input channels {self.config.in_dim}")
        layers = len(self.config.widths)
        first_drop = layers - self.config.dropout_on_last_k
        caches = []
        for k in range(layers):
            x, c_conv = T.conv2d_3x3(x, params[f"conv{k}.W"], params[f"conv{k}.b"])
            x, c_act = T.pointwise("relu", x)
            mask = None
            if k >= first_drop:
                x, mask = T.dropout(x, self.config.dropout_rate, mode, rng)
            caches.append((c_conv, c_act, mask))
        logits, c_head = T.dense(x, params["head.W"], params["head.b"])
        cache = (caches, c_head, squeeze)
        return (logits[0] if squeeze else logits), cache

    def backward(self, params, dlogits, cache, need_input_grad=False):
        caches, c_head, squeeze = cache
        if squeeze:
            dlogits = dlogits[None]
        grads = {}
        dx, grads["head.W"], grads["head.b"] = T.dense_backward(dlogits, c_head)
        for k in reversed(range(len(caches))):
            c_conv, c_act, mask = caches[k]
            dx = T.dropout_backward(dx, mask)
            dx = T.pointwise_backward(dx, c_act)
            dx, grads[f"conv{k}.W"], grads[f"conv{k}.b"] = T.conv2d_3x3_backward(dx, c_conv)
        if need_input_grad:
            grads["input"] = dx[0] if squeeze else dx
        return grads


def ran_cnn_forward(grid, config, params, mode="infer", rng=None):
    data = grid if isinstance(grid, np.ndarray) else getattr(grid, "data", grid)
    return RanCnn(config).forward(params, data, mode, rng)[0]
