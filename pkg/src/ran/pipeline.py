"""Patches -> features -> grids -> aggregator predictions -> metrics, in memory.

The CLI wraps these steps with artifact files; the benchmark helpers here run
them end to end for the synthetic comparison of patch-only and context
models.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .encoder import EncoderConfig, PatchEncoder, extract_features
from .evaluate import pr_curve, stitch_mask
from .grids import assemble_grids, balanced_sample, stack_pairs, tissue_mask
from .params import rng_for
from .ran_cnn import CNN_VARIANTS, RanCnn, build_ran_cnn_variant
from .ran_lstm import LSTM_VARIANTS, RanLstm, build_ran_lstm_variant
from .synth import SynthConfig, dataset_bundle, slide_patches
from .trainer import Dataset, TrainConfig, train

log = logging.getLogger(__name__)

PATCH_ONLY = "patch-only"


class VariantError(ValueError):
    pass


def parse_variant(name):
    """``("ran-cnn", "5L-D")`` style pair for a variant name.

    Accepts bare Table-style suffixes (``5L-D``, ``2L``) or prefixed forms
    (``cnn-5L-D``, ``lstm-2L``).
    """
    raw = name
    for prefix, kind in (("ran-cnn-", "ran-cnn"), ("cnn-", "ran-cnn"),
                         ("ran-lstm-", "ran-lstm"), ("lstm-", "ran-lstm")):
        if name.startswith(prefix):
            short = name[len(prefix):]
            table = CNN_VARIANTS if kind == "ran-cnn" else LSTM_VARIANTS
            if short in table:
                return kind, short
            raise VariantError(f"unknown variant {raw!r}")
    if name in CNN_VARIANTS:
        return "ran-cnn", name
    if name in LSTM_VARIANTS:
        return "ran-lstm", name
    raise VariantError(f"unknown variant {raw!r}")


def canonical_variant(name):
    kind, short = parse_variant(name)
    return f"{'cnn' if kind == 'ran-cnn' else 'lstm'}-{short}"


@dataclass(frozen=True)
class BenchConfig:
    synth: SynthConfig = SynthConfig()
    slide_count: int = 20
    split: float = 0.8
    tissue_threshold: float = 0.15
    encoder: EncoderConfig = EncoderConfig()
    encoder_train: TrainConfig = TrainConfig.for_model("encoder", epochs=4)
    encoder_patches: int = 4000
    grid_n: int = 8
    grid_m: int = 8
    train_stride: int = 4
    eval_stride: int = 8
    balance: bool = True
    cnn_widths: tuple = (128, 128, 64, 64, 64)
    cnn_train: TrainConfig = TrainConfig.for_model("ran-cnn", batch_size=16, lr=1e-3, epochs=12, patience=0)
    lstm_hidden: int = 32
    lstm_average: str = "hidden"
    lstm_train: TrainConfig = TrainConfig.for_model("ran-lstm", batch_size=10, lr=3e-3, decay_every=6, epochs=18)
    threads: int = 1
    seed: int = 0

    def with_seed(self, seed):
        return replace(self, seed=seed, synth=replace(self.synth, seed=seed))


def desk_preset(seed=0, **overrides):
    """Desk-scale synthetic benchmark: 20 slides of 32x32 patches, alpha 0.3."""
    return replace(BenchConfig(), **overrides).with_seed(seed)


@dataclass
class SlideData:
    slide_id: str
    lattice_shape: tuple
    coords: np.ndarray
    labels: np.ndarray           # lattice-shaped ground truth
    mask: np.ndarray             # lattice-shaped tissue mask used for grids and metrics
    features: np.ndarray | None = None
    patch_probs: np.ndarray | None = None


def slide_data(slide, patch_px, threshold):
    mask = tissue_mask(slide.image, patch_px, threshold)
    coords = np.argwhere(mask)
    return SlideData(slide.slide_id, mask.shape, coords, slide.labels.copy(), mask)


def encoder_training_set(slides, patch_px, masks, limit, seed):
    pix, lab = [], []
    for slide, mask in zip(slides, masks):
        _, p, y = slide_patches(slide, patch_px, mask)
        pix.append(p)
        lab.append(y)
    pixels = np.concatenate(pix)
    labels = np.concatenate(lab).astype(np.int64)
    if limit and len(pixels) > limit:
        idx = np.sort(rng_for(seed, "encoder.subset").choice(len(pixels), limit, replace=False))
        pixels, labels = pixels[idx], labels[idx]
    return pixels, labels


def train_encoder(pixels, labels, config, train_config, out_dir=None):
    labels = np.asarray(labels, dtype=np.int64)
    if len(pixels) == 0:
        raise ValueError("empty patch dataset")
    if len(np.unique(labels)) < 2:
        raise ValueError("patch dataset contains a single class; cross-entropy is degenerate")
    model = PatchEncoder(config)
    params = model.init_params(train_config.seed)
    if train_config.epochs == 0:
        from .trainer import TrainResult
        return TrainResult(params)
    return train(model, Dataset(np.asarray(pixels), labels), train_config, params=params,
                 out_dir=out_dir, prefix="encoder")


def encode_slides(slides, data, params, config, threads=1):
    for slide, sd in zip(slides, data):
        _, pixels, _ = slide_patches(slide, config.patch_size, sd.mask)
        sd.features, sd.patch_probs = extract_features(pixels, params, config, threads=threads)


def grids_for(data, n, m, stride):
    pairs = []
    for sd in data:
        labels = sd.labels[sd.coords[:, 0], sd.coords[:, 1]]
        pairs += assemble_grids(sd.coords, sd.features, labels, n, m, stride, sd.slide_id,
                                lattice_shape=sd.lattice_shape)
    return pairs


def build_aggregator(variant, in_dim, cnn_widths=(128, 128, 64, 64, 64), lstm_hidden=32,
                     lstm_average="hidden"):
    kind, short = parse_variant(variant)
    if kind == "ran-cnn":
        return RanCnn(build_ran_cnn_variant(short, in_dim, cnn_widths))
    return RanLstm(build_ran_lstm_variant(short, in_dim, lstm_hidden, lstm_average))


def predict_grids(model, params, pairs, batch_size=32, threads=1):
    """Tumour probability (G, N, M) per grid, in input order."""
    if not pairs:
        return np.zeros((0,))
    x = np.stack([g.data for g, _ in pairs])
    spans = [(lo, min(lo + batch_size, len(x))) for lo in range(0, len(x), batch_size)]
    out = np.empty(x.shape[:3], dtype=params.dtype)

    def run(span):
        lo, hi = span
        logits, _ = model.forward(params, x[lo:hi], "infer")
        out[lo:hi] = T.softmax(logits)[..., 1]

    if threads > 1 and len(spans) > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(run, spans))
    else:
        for span in spans:
            run(span)
    return out


def stitch_predictions(pairs, probs, data):
    """Slide id -> stitched probability map."""
    by_slide = {sd.slide_id: [] for sd in data}
    for (grid, _), p in zip(pairs, probs):
        by_slide[grid.origin[0]].append((grid.origin[1:], p))
    return {sd.slide_id: stitch_mask(by_slide[sd.slide_id], sd.lattice_shape)[0] for sd in data}


def patch_prob_maps(data):
    maps = {}
    for sd in data:
        pm = np.zeros(sd.lattice_shape, dtype=np.float64)
        pm[sd.coords[:, 0], sd.coords[:, 1]] = sd.patch_probs
        maps[sd.slide_id] = pm
    return maps


def evaluate_maps(maps, data, thresholds=None):
    probs = np.concatenate([maps[sd.slide_id][sd.mask] for sd in data])
    labels = np.concatenate([sd.labels[sd.mask] for sd in data])
    return pr_curve(probs, labels, None, thresholds)


@dataclass
class BenchResult:
    reports: dict = field(default_factory=dict)
    maps: dict = field(default_factory=dict)
    logs: dict = field(default_factory=dict)

    def best_f1(self):
        return {k: r.best_f1 for k, r in self.reports.items()}


def run_benchmark(cfg, variants=("cnn-5L-D", "lstm-2L")):
    """Train the encoder and each aggregator variant; evaluate on held-out slides."""
    bundle = dataset_bundle(cfg.synth, cfg.slide_count, cfg.split)
    px = cfg.encoder.patch_size
    train_data = [slide_data(s, px, cfg.tissue_threshold) for s in bundle.train]
    val_data = [slide_data(s, px, cfg.tissue_threshold) for s in bundle.val]

    pixels, labels = encoder_training_set(bundle.train, px, [d.mask for d in train_data],
                                          cfg.encoder_patches, cfg.seed)
    enc_cfg = replace(cfg.encoder_train, seed=cfg.seed)
    enc = train_encoder(pixels, labels, cfg.encoder, enc_cfg)
    encode_slides(bundle.train, train_data, enc.params, cfg.encoder, cfg.threads)
    encode_slides(bundle.val, val_data, enc.params, cfg.encoder, cfg.threads)

    result = BenchResult()
    result.logs[PATCH_ONLY] = enc.log
    result.maps[PATCH_ONLY] = patch_prob_maps(val_data)
    result.reports[PATCH_ONLY] = evaluate_maps(result.maps[PATCH_ONLY], val_data)

    train_pairs = grids_for(train_data, cfg.grid_n, cfg.grid_m, cfg.train_stride)
    if cfg.balance:
        train_pairs = balanced_sample(train_pairs, cfg.seed)
    val_pairs = grids_for(val_data, cfg.grid_n, cfg.grid_m, cfg.eval_stride)
    x, y, mask = stack_pairs(train_pairs)
    data = Dataset(x, y, mask)
    for variant in variants:
        name = canonical_variant(variant)
        model = build_aggregator(name, cfg.encoder.feature_dim, cfg.cnn_widths, cfg.lstm_hidden,
                                 cfg.lstm_average)
        tcfg = cfg.cnn_train if model.kind == "ran-cnn" else cfg.lstm_train
        tr = train(model, data, replace(tcfg, seed=cfg.seed))
        probs = predict_grids(model, tr.params, val_pairs, threads=cfg.threads)
        result.logs[name] = tr.log
        result.maps[name] = stitch_predictions(val_pairs, probs, val_data)
        result.reports[name] = evaluate_maps(result.maps[name], val_data)
        log.info("%s best F1 %.4f", name, result.reports[name].best_f1)
    return result
