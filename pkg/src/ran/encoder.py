"""Small patch classifier used as the representation network.

Layout: ``len(conv_channels)`` blocks of (3x3 conv, ReLU, 2x2 average pool),
flatten, FC-A + ReLU, FC-B + ReLU, linear 2-class head.  Features are the
post-ReLU activations of the tapped FC layer.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .params import ParamStore, check_shapes, rng_for

FEATURE_TAPS = ("fc_a", "fc_b")


@dataclass(frozen=True)
class EncoderConfig:
    patch_size: int = 32
    conv_channels: tuple = (8, 16, 16)
    fc_a: int = 64
    fc_b: int = 32
    feature_tap: str = "fc_a"
    class_count: int = 2

    def __post_init__(self):
        if self.feature_tap not in FEATURE_TAPS:
            raise ValueError(f"feature_tap must be one of {FEATURE_TAPS}, got {self.feature_tap!r}")
        if self.patch_size % (2 ** len(self.conv_channels)):
            raise ValueError(
                f"patch_size {self.patch_size} not divisible by 2**{len(self.conv_channels)} pooling stages")

    @property
    def feature_dim(self):
        return self.fc_a if self.feature_tap == "fc_a" else self.fc_b

    @property
    def flat_dim(self):
        side = self.patch_size // 2 ** len(self.conv_channels)
        return side * side * self.conv_channels[-1]


@dataclass
class PatchTensor:
    pixels: np.ndarray
    label: int | None = None
    slide_id: str = ""
    grid_coords: tuple = (0, 0)


def param_shapes(config):
    shapes = {}
    cin = 3
    for k, cout in enumerate(config.conv_channels):
        shapes[f"conv{k}.W"] = (3, 3, cin, cout)
        shapes[f"conv{k}.b"] = (cout,)
        cin = cout
    shapes["fc_a.W"] = (config.flat_dim, config.fc_a)
    shapes["fc_a.b"] = (config.fc_a,)
    shapes["fc_b.W"] = (config.fc_a, config.fc_b)
    shapes["fc_b.b"] = (config.fc_b,)
    shapes["head.W"] = (config.fc_b, config.class_count)
    shapes["head.b"] = (config.class_count,)
    return shapes


class PatchEncoder:
    kind = "encoder"

    def __init__(self, config=EncoderConfig()):
        self.config = config

    def init_params(self, seed, dtype=np.float32, zero=False):
        rng = rng_for(seed, "encoder.init")
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
        check_shapes(params, param_shapes(self.config))

    def prepare(self, pixels, dtype):
        x = np.asarray(pixels)
        if x.ndim == 3:
            x = x[None]
        p = self.config.patch_size
        if x.shape[1:] != (p, p, 3):
            raise T.ShapeError(f"patch extent {x.shape[1:]} does not match configured ({p}, {p}, 3)")
        if x.dtype == np.uint8:
            return x.astype(dtype) / dtype(255.0)
        return x.astype(dtype)

    def forward_full(self, params, pixels, mode="infer", rng=None):
        """Returns ``(logits, features, cache)``."""
        dtype = params.dtype.type
        x = self.prepare(pixels, dtype)
        caches = []
        for k in range(len(self.config.conv_channels)):
            x, c_conv = T.conv2d_3x3(x, params[f"conv{k}.W"], params[f"conv{k}.b"])
            x, c_act = T.pointwise("relu", x)
            x, c_pool = T.avg_pool2x2(x)
            caches.append((c_conv, c_act, c_pool))
        flat_shape = x.shape
        x = x.reshape(x.shape[0], -1)
        a, c_fa = T.dense(x, params["fc_a.W"], params["fc_a.b"])
        a, c_ra = T.pointwise("relu", a)
        b, c_fb = T.dense(a, params["fc_b.W"], params["fc_b.b"])
        b, c_rb = T.pointwise("relu", b)
        logits, c_head = T.dense(b, params["head.W"], params["head.b"])
        features = a if self.config.feature_tap == "fc_a" else b
        cache = (caches, flat_shape, c_fa, c_ra, c_fb, c_rb, c_head)
        return logits, features, cache

    def forward(self, params, pixels, mode="infer", rng=None):
        logits, _, cache = self.forward_full(params, pixels, mode, rng)
        return logits, cache

    def backward(self, params, dlogits, cache):
        caches, flat_shape, c_fa, c_ra, c_fb, c_rb, c_head = cache
        grads = {}
        db_, grads["head.W"], grads["head.b"] = T.dense_backward(dlogits, c_head)
        db_ = T.pointwise_backward(db_, c_rb)
        da, grads["fc_b.W"], grads["fc_b.b"] = T.dense_backward(db_, c_fb)
        da = T.pointwise_backward(da, c_ra)
        dx, grads["fc_a.W"], grads["fc_a.b"] = T.dense_backward(da, c_fa)
        dx = dx.reshape(flat_shape)
        for k in reversed(range(len(caches))):
            c_conv, c_act, c_pool = caches[k]
            dx = T.avg_pool2x2_backward(dx, c_pool)
            dx = T.pointwise_backward(dx, c_act)
            dx, grads[f"conv{k}.W"], grads[f"conv{k}.b"] = T.conv2d_3x3_backward(dx, c_conv)
        return grads


def encoder_forward(patch, config, params):
    """Single-patch forward: ``(class_logits (2,), features (D,))``."""
    pixels = patch.pixels if isinstance(patch, PatchTensor) else patch
    logits, features, _ = PatchEncoder(config).forward_full(params, pixels)
    return logits[0], features[0]


def _chunks(n, size):
    return [(i, min(i + size, n)) for i in range(0, n, size)]


def extract_features(pixels, params, config, chunk=256, threads=1):
    """Features and tumour probabilities for every patch, in input order.

    Work is split into fixed ``chunk``-sized pieces regardless of ``threads``,
    so the thread count never changes the result.
    """
    model = PatchEncoder(config)
    model.check(params)
    n = len(pixels)
    out_f = np.empty((n, config.feature_dim), dtype=params.dtype)
    out_p = np.empty(n, dtype=params.dtype)

    def run(span):
        lo, hi = span
        logits, feats, _ = model.forward_full(params, pixels[lo:hi])
        out_f[lo:hi] = feats
        out_p[lo:hi] = T.softmax(logits)[:, 1]

    spans = _chunks(n, chunk)
    if threads > 1 and len(spans) > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(run, spans))
    else:
        for span in spans:
            run(span)
    return out_f, out_p
