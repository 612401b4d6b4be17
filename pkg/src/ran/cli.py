"""Command-line entry point: ``ran <command> [--config PATH] [--seed N] ...``.

Run config: a flat text file of ``key = value`` lines (``#`` starts a
comment).  Keys and defaults are the fields of :class:`RunConfig`; tuples are
comma-separated.  ``--seed``, ``--variant`` and ``--out`` override the file.

Artifacts under the output directory::

    slides/<id>.ppm, <id>_labels.csv, <id>_geometry.txt, split.csv     synth
    encoder/encoder.ckpt, encoder_log.csv, encoder_epoch<k>.ckpt       train-encoder
    features/<id>.feat (RANFEAT1), <id>_prob.npy                      extract
    grids/train_grids.bin, train_manifest.txt                          train-agg
    agg/<variant>/model.ckpt, model_log.csv, model_epoch<k>.ckpt       train-agg
    pred/<variant>/<id>.npy, <id>.pgm, <id>_mask.pgm                   predict
    eval/<variant>_pr.csv, eval/summary.csv                            eval
    manifests/<command>[_<variant>].txt

Exit codes: 0 success, 1 failed gradient check, 2 missing artifact, 3 invalid
config or variant.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import os
import sys
from dataclasses import dataclass, fields, replace

import numpy as np

from .encoder import EncoderConfig, PatchEncoder, extract_features
from .evaluate import pr_curve
from .formats import read_features, read_grids, write_features, write_grids, write_pgm
from .gradcheck import grad_check
from .grids import assemble_grids, balanced_sample, manifest_lines, stack_pairs, tissue_mask
from .params import load_checkpoint, save_checkpoint
from .pipeline import (PATCH_ONLY, SlideData, VariantError, build_aggregator, canonical_variant,
                       encoder_training_set, predict_grids, stitch_predictions, train_encoder)
from .ran_cnn import RanCnn, build_ran_cnn_variant
from .ran_lstm import RanLstm, RanLstmConfig
from .synth import SynthConfig, dataset_bundle, load_slide, read_labels_csv, save_slide, slide_patches
from .trainer import Dataset, TrainConfig, loss_closure, train

log = logging.getLogger("ran")

EXIT_GRADCHECK = 1
EXIT_MISSING = 2
EXIT_CONFIG = 3
COMMANDS = ("synth", "train-encoder", "extract", "train-agg", "predict", "eval", "gradcheck", "pipeline")
# left out of the config hash: threads and paths never change outputs, and
# the variant is recorded on its own manifest line
RUNTIME_KEYS = ("out_dir", "threads", "variant")


class MissingArtifact(Exception):
    def __init__(self, path):
        super().__init__(path)
        self.path = path


class ConfigError(Exception):
    def __init__(self, field, message):
        super().__init__(message)
        self.field = field


@dataclass(frozen=True)
class RunConfig:
    out_dir: str = "run"
    seed: int = 0
    threads: int = 1
    # synthetic slides
    slide_count: int = 20
    split: float = 0.8
    slide_rows: int = 32
    slide_cols: int = 32
    patch_px: int = 32
    blob_count: int = 3
    radius_min: float = 3.0
    radius_max: float = 7.0
    alpha: float = 0.3
    noise: float = 0.06
    tissue_threshold: float = 0.15
    # encoder
    conv_channels: tuple = (8, 16, 16)
    fc_a: int = 64
    fc_b: int = 32
    feature_tap: str = "fc_a"
    encoder_patches: int = 4000
    encoder_batch: int = 64
    encoder_lr: float = 1e-3
    encoder_epochs: int = 4
    # grids
    grid_n: int = 8
    grid_m: int = 8
    train_stride: int = 4
    eval_stride: int = 8
    balance: bool = True
    # aggregators
    variant: str = "lstm-2L"
    variants: tuple = ("cnn-5L-D", "lstm-2L")
    cnn_widths: tuple = (128, 128, 64, 64, 64)
    cnn_dropout: float = 0.5
    cnn_batch: int = 16
    cnn_lr: float = 1e-3
    cnn_epochs: int = 12
    cnn_patience: int = 0
    lstm_hidden: int = 32
    lstm_average: str = "hidden"
    lstm_batch: int = 10
    lstm_lr: float = 3e-3
    lstm_decay: float = 0.5
    lstm_decay_every: int = 6
    lstm_epochs: int = 18
    # evaluation
    threshold_count: int = 101
    mask_threshold: float = 0.5

    def synth(self):
        return SynthConfig(self.slide_rows, self.slide_cols, self.patch_px, self.blob_count,
                           (self.radius_min, self.radius_max), self.alpha, self.noise, seed=self.seed)

    def encoder(self):
        return EncoderConfig(self.patch_px, tuple(self.conv_channels), self.fc_a, self.fc_b, self.feature_tap)

    def encoder_train(self):
        return TrainConfig("encoder", self.encoder_batch, self.encoder_lr, 1.0, 1, self.encoder_epochs, self.seed)

    def agg_train(self, kind):
        if kind == "ran-cnn":
            return TrainConfig("ran-cnn", self.cnn_batch, self.cnn_lr, 1.0, 1, self.cnn_epochs, self.seed,
                               patience=self.cnn_patience)
        return TrainConfig("ran-lstm", self.lstm_batch, self.lstm_lr, self.lstm_decay, self.lstm_decay_every,
                           self.lstm_epochs, self.seed)

    def thresholds(self):
        return np.linspace(0.0, 1.0, self.threshold_count)

    def canonical(self):
        """``key=value`` lines covering every output-affecting setting."""
        return "".join(f"{f.name}={_format_value(getattr(self, f.name))}\n"
                       for f in fields(self) if f.name not in RUNTIME_KEYS)

    def digest(self):
        return hashlib.sha256(self.canonical().encode("utf-8")).hexdigest()


def _format_value(v):
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def _parse_value(name, kind, raw):
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return tuple(int(s) if s.lstrip("-").isdigit() else s for s in items)
        return raw
    except ValueError:
        raise ConfigError(name, f"cannot parse {raw!r} as {kind.__name__}") from None


_KINDS = {"int": int, "float": float, "bool": bool, "tuple": tuple, "str": str}


def _field_kinds():
    return {f.name: _KINDS[f.type] for f in fields(RunConfig)}


def parse_config_text(text, base=RunConfig()):
    kinds = _field_kinds()
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(key, "unknown config key")
        values[key] = _parse_value(key, kinds[key], raw)
    return replace(base, **values)


def validate(cfg):
    """Raise :class:`ConfigError` naming the first invalid field."""
    checks = [
        ("slide_count", cfg.slide_count >= 2, "must be >= 2"),
        ("split", 0 < cfg.split < 1, "must lie in (0, 1)"),
        ("alpha", 0 <= cfg.alpha < 0.5, "must lie in [0, 0.5)"),
        ("threads", cfg.threads >= 1, "must be >= 1"),
        ("grid_n", cfg.grid_n >= 1, "must be >= 1"),
        ("grid_m", cfg.grid_m >= 1, "must be >= 1"),
        ("train_stride", cfg.train_stride >= 1, "must be >= 1"),
        ("eval_stride", cfg.eval_stride >= 1, "must be >= 1"),
        ("feature_tap", cfg.feature_tap in ("fc_a", "fc_b"), "must be fc_a or fc_b"),
        ("lstm_average", cfg.lstm_average in ("hidden", "logits"), "must be hidden or logits"),
        ("lstm_hidden", cfg.lstm_hidden >= 1, "must be >= 1"),
        ("threshold_count", cfg.threshold_count >= 2, "must be >= 2"),
        ("mask_threshold", 0 <= cfg.mask_threshold <= 1, "must lie in [0, 1]"),
        ("cnn_dropout", 0 <= cfg.cnn_dropout < 1, "must lie in [0, 1)"),
    ]
    for name, ok, message in checks:
        if not ok:
            raise ConfigError(name, f"{message}, got {getattr(cfg, name)!r}")
    for name in ("variant",):
        _check_variant(name, getattr(cfg, name))
    for v in cfg.variants:
        _check_variant("variants", v)
    try:
        cfg.synth()
        cfg.encoder()
        for kind in ("ran-cnn", "ran-lstm"):
            cfg.agg_train(kind)
        cfg.encoder_train()
    except ValueError as exc:
        raise ConfigError(_guess_field(str(exc)), str(exc)) from None
    return cfg


def _check_variant(field, name):
    if name == PATCH_ONLY:
        return
    try:
        canonical_variant(name)
    except VariantError as exc:
        raise ConfigError(field, str(exc)) from None


def _guess_field(message):
    for f in fields(RunConfig):
        if f.name in message:
            return f.name
    for key, field in (("patch_size", "patch_px"), ("batch_size", "batch"), ("lr", "lr")):
        if key in message:
            return field
    return "config"


# ---------------------------------------------------------------- artifacts

class Run:
    """Paths, hashing and manifest writing for one output directory."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.root = cfg.out_dir

    def path(self, *parts):
        return os.path.join(self.root, *parts)

    def need(self, *parts):
        p = self.path(*parts)
        if not os.path.exists(p):
            raise MissingArtifact(p)
        return p

    def ensure_dir(self, *parts):
        p = self.path(*parts)
        os.makedirs(p, exist_ok=True)
        return p

    def split(self):
        with open(self.need("slides", "split.csv"), newline="") as fh:
            rows = list(csv.DictReader(fh))
        return ([r["slide_id"] for r in rows if r["side"] == "train"],
                [r["slide_id"] for r in rows if r["side"] == "val"])

    def manifest(self, command, written, variant=None):
        self.ensure_dir("manifests")
        lines = [f"command {command}"]
        if variant:
            lines.append(f"variant {variant}")
        lines += [f"seed {self.cfg.seed}", f"config_sha256 {self.cfg.digest()}"]
        for p in sorted(set(written)):
            with open(p, "rb") as fh:
                digest = hashlib.sha256(fh.read()).hexdigest()
            lines.append(f"artifact {digest} {os.path.relpath(p, self.root)}")
        name = command if not variant else f"{command}_{variant}"
        path = self.path("manifests", f"{name}.txt")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
        return path


def _listdir(path):
    return sorted(os.path.join(path, f) for f in os.listdir(path))


# ---------------------------------------------------------------- commands

def cmd_synth(run):
    cfg = run.cfg
    slides_dir = run.ensure_dir("slides")
    bundle = dataset_bundle(cfg.synth(), cfg.slide_count, cfg.split)
    for slide in bundle.all_slides():
        save_slide(slide, slides_dir)
    split_path = os.path.join(slides_dir, "split.csv")
    with open(split_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("slide_id", "side", "tissue_patches", "tumour_patches"))
        w.writerows(bundle.manifest)
    run.manifest("synth", _listdir(slides_dir))


def _slides(run, ids):
    slides = []
    for sid in ids:
        run.need("slides", f"{sid}.ppm")
        slides.append(load_slide(run.path("slides"), sid))
    return slides


def cmd_train_encoder(run):
    cfg = run.cfg
    train_ids, _ = run.split()
    slides = _slides(run, train_ids)
    masks = [tissue_mask(s.image, cfg.patch_px, cfg.tissue_threshold) for s in slides]
    pixels, labels = encoder_training_set(slides, cfg.patch_px, masks, cfg.encoder_patches, cfg.seed)
    out = run.ensure_dir("encoder")
    result = train_encoder(pixels, labels, cfg.encoder(), cfg.encoder_train(), out_dir=out)
    save_checkpoint(result.params, os.path.join(out, "encoder.ckpt"))
    run.manifest("train-encoder", _listdir(out))


def cmd_extract(run):
    cfg = run.cfg
    params = load_checkpoint(run.need("encoder", "encoder.ckpt"))
    train_ids, val_ids = run.split()
    out = run.ensure_dir("features")
    written = []
    for slide in _slides(run, train_ids + val_ids):
        mask = tissue_mask(slide.image, cfg.patch_px, cfg.tissue_threshold)
        coords, pixels, _ = slide_patches(slide, cfg.patch_px, mask)
        try:
            feats, probs = extract_features(pixels, params, cfg.encoder(), threads=cfg.threads)
        except ValueError as exc:
            raise ConfigError("encoder", str(exc)) from None
        feat_path = os.path.join(out, f"{slide.slide_id}.feat")
        prob_path = os.path.join(out, f"{slide.slide_id}_prob.npy")
        write_features(feat_path, slide.slide_id, mask.shape, coords, feats)
        np.save(prob_path, probs.astype(np.float32))
        written += [feat_path, prob_path]
    run.manifest("extract", written)


def _slide_data(run, ids):
    data = []
    for sid in ids:
        slide_id, shape, coords, feats = read_features(run.need("features", f"{sid}.feat"))
        probs = np.load(run.need("features", f"{sid}_prob.npy"))
        labels, _, _ = read_labels_csv(run.need("slides", f"{sid}_labels.csv"), shape)
        mask = np.zeros(shape, dtype=bool)
        mask[coords[:, 0], coords[:, 1]] = True
        data.append(SlideData(slide_id, shape, coords, labels, mask, feats, probs))
    return data


def _grids(data, cfg, stride):
    pairs = []
    for sd in data:
        labels = sd.labels[sd.coords[:, 0], sd.coords[:, 1]]
        pairs += assemble_grids(sd.coords, sd.features, labels, cfg.grid_n, cfg.grid_m, stride,
                                sd.slide_id, lattice_shape=sd.lattice_shape)
    return pairs


def _aggregator(cfg, variant, in_dim):
    try:
        return build_aggregator(variant, in_dim, tuple(cfg.cnn_widths), cfg.lstm_hidden, cfg.lstm_average)
    except VariantError as exc:
        raise ConfigError("variant", str(exc)) from None


def cmd_train_agg(run, variant):
    cfg = run.cfg
    if variant == PATCH_ONLY:
        raise ConfigError("variant", "patch-only has no aggregator to train")
    name = canonical_variant(variant)
    train_ids, _ = run.split()
    data = _slide_data(run, train_ids)
    pairs = _grids(data, cfg, cfg.train_stride)
    if cfg.balance:
        pairs = balanced_sample(pairs, cfg.seed)
    if not pairs:
        raise ConfigError("balance", "no training grids left after sampling")
    grid_dir = run.ensure_dir("grids")
    grid_path = os.path.join(grid_dir, "train_grids.bin")
    manifest_path = os.path.join(grid_dir, "train_manifest.txt")
    write_grids(grid_path, pairs)
    with open(manifest_path, "w") as fh:
        fh.write("slide_id,row0,col0,N,M,positive_cells\n" + "\n".join(manifest_lines(pairs)) + "\n")
    x, y, mask = stack_pairs(read_grids(grid_path))
    model = _aggregator(cfg, name, x.shape[-1])
    if model.kind == "ran-cnn" and cfg.cnn_dropout != 0.5:
        model = RanCnn(replace(model.config, dropout_rate=cfg.cnn_dropout))
    out = run.ensure_dir("agg", name)
    result = train(model, Dataset(x, y, mask), cfg.agg_train(model.kind), out_dir=out, prefix="model")
    save_checkpoint(result.params, os.path.join(out, "model.ckpt"))
    run.manifest("train-agg", [grid_path, manifest_path] + _listdir(out), name)


def _write_maps(run, name, maps, cfg):
    out = run.ensure_dir("pred", name)
    written = []
    for sid, prob_map in maps.items():
        npy = os.path.join(out, f"{sid}.npy")
        pgm = os.path.join(out, f"{sid}.pgm")
        mask_pgm = os.path.join(out, f"{sid}_mask.pgm")
        np.save(npy, prob_map.astype(np.float32))
        write_pgm(pgm, prob_map)
        write_pgm(mask_pgm, (prob_map >= cfg.mask_threshold).astype(np.float64))
        written += [npy, pgm, mask_pgm]
    return written


def cmd_predict(run, variant):
    cfg = run.cfg
    _, val_ids = run.split()
    data = _slide_data(run, val_ids)
    if variant == PATCH_ONLY:
        name = PATCH_ONLY
        maps = {}
        for sd in data:
            pm = np.zeros(sd.lattice_shape, dtype=np.float64)
            pm[sd.coords[:, 0], sd.coords[:, 1]] = sd.patch_probs
            maps[sd.slide_id] = pm
    else:
        name = canonical_variant(variant)
        params = load_checkpoint(run.need("agg", name, "model.ckpt"))
        pairs = _grids(data, cfg, cfg.eval_stride)
        model = _aggregator(cfg, name, pairs[0][0].data.shape[-1])
        try:
            model.check(params)
        except ValueError as exc:
            raise ConfigError("variant", f"checkpoint does not fit {name}: {exc}") from None
        probs = predict_grids(model, params, pairs, threads=cfg.threads)
        maps = stitch_predictions(pairs, probs, data)
    run.manifest("predict", _write_maps(run, name, maps, cfg), name)


def _predicted_variants(run):
    pred = run.path("pred")
    if not os.path.isdir(pred):
        raise MissingArtifact(pred)
    return sorted(d for d in os.listdir(pred) if os.path.isdir(os.path.join(pred, d)))


def cmd_eval(run, variant=None):
    cfg = run.cfg
    _, val_ids = run.split()
    data = _slide_data(run, val_ids)
    names = [PATCH_ONLY if variant == PATCH_ONLY else canonical_variant(variant)] if variant else \
        _predicted_variants(run)
    out = run.ensure_dir("eval")
    written, summary = [], []
    for name in names:
        probs, labels = [], []
        for sd in data:
            prob_map = np.load(run.need("pred", name, f"{sd.slide_id}.npy"))
            probs.append(prob_map[sd.mask])
            labels.append(sd.labels[sd.mask])
        report = pr_curve(np.concatenate(probs), np.concatenate(labels), None, cfg.thresholds())
        path = os.path.join(out, f"{name}_pr.csv")
        report.write_csv(path)
        written.append(path)
        summary.append((name, f"{report.best_f1:.6f}", f"{report.best_threshold:.6g}", report.cells))
        print(f"{name}: best F1 {report.best_f1:.4f} at threshold {report.best_threshold:.2f}")
    if not variant:
        path = os.path.join(out, "summary.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("variant", "best_f1", "best_threshold", "cells"))
            w.writerows(summary)
        written.append(path)
    run.manifest("eval", written, variant and names[0])


def cmd_pipeline(run):
    cmd_synth(run)
    cmd_train_encoder(run)
    cmd_extract(run)
    variants = [canonical_variant(v) for v in run.cfg.variants if v != PATCH_ONLY]
    for v in variants:
        cmd_train_agg(run, v)
    cmd_predict(run, PATCH_ONLY)
    for v in variants:
        cmd_predict(run, v)
    cmd_eval(run)


def _parse_grid(text):
    try:
        n, m = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ConfigError("grid", f"expected NxM, got {text!r}") from None
    if n < 1 or m < 1:
        raise ConfigError("grid", f"extents must be >= 1, got {text!r}")
    return n, m


def cmd_gradcheck(model_kind, grid, hidden, samples, seed):
    """Finite-difference check of a small float64 model; returns the report."""
    n, m = _parse_grid(grid)
    rng = np.random.default_rng(seed)
    d = 8
    if model_kind == "encoder":
        model = PatchEncoder(EncoderConfig(patch_size=8, conv_channels=(3, 4), fc_a=hidden, fc_b=hidden))
        x = rng.random((n * m, 8, 8, 3))
        y = rng.integers(0, 2, n * m)
        closure = loss_closure(model, x, y)
    elif model_kind == "ran-cnn":
        model = RanCnn(build_ran_cnn_variant("5L-D", d, (hidden,) * 5))
        x = rng.standard_normal((2, n, m, d))
        y = rng.integers(0, 2, (2, n, m))
        closure = loss_closure(model, x, y, mode="train", dropout_seed=seed)
    elif model_kind == "ran-lstm":
        model = RanLstm(RanLstmConfig(d, hidden, 2))
        x = rng.standard_normal((2, n, m, d))
        y = rng.integers(0, 2, (2, n, m))
        closure = loss_closure(model, x, y)
    else:
        raise ConfigError("model", f"unknown model {model_kind!r}; expected encoder, ran-cnn or ran-lstm")
    params = model.init_params(seed, np.float64)
    # zero biases put every ReLU exactly on its kink and can leave small nets dead
    for name in params.names():
        if name.endswith(".b"):
            params.entries[name].value = 0.1 * rng.standard_normal(params[name].shape)
    return grad_check(closure, params, samples, 1e-4, seed=seed)


# ---------------------------------------------------------------- entry point

def build_parser():
    parser = argparse.ArgumentParser(prog="ran", description="Representation-aggregation network tools.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="flat key = value run config")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--threads", type=int)
    parser.add_argument("--variant", help="aggregator variant, e.g. lstm-2L, cnn-5L-D or patch-only")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--model", default="ran-lstm", help="gradcheck: encoder, ran-cnn or ran-lstm")
    parser.add_argument("--grid", default="3x3", help="gradcheck: grid extent NxM")
    parser.add_argument("--hidden", type=int, default=4, help="gradcheck: hidden width")
    parser.add_argument("--samples", type=int, default=20, help="gradcheck: coordinates per parameter")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def load_run_config(args):
    cfg = RunConfig()
    if args.config:
        if not os.path.exists(args.config):
            raise MissingArtifact(args.config)
        with open(args.config) as fh:
            cfg = parse_config_text(fh.read(), cfg)
    overrides = {k: v for k, v in (("seed", args.seed), ("threads", args.threads),
                                   ("variant", args.variant), ("out_dir", args.out)) if v is not None}
    return validate(replace(cfg, **overrides))


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_run_config(args)
        run = Run(cfg)
        if args.command == "gradcheck":
            report = cmd_gradcheck(args.model, args.grid, args.hidden, args.samples, cfg.seed)
            for name, err in sorted(report.per_param.items()):
                print(f"{name}: {err:.3e}")
            verdict = "PASS" if report.passed else "FAIL"
            print(f"{verdict} max rel err {report.max_rel_err:.3e} (tolerance {report.tolerance:g}, "
                  f"{report.checked} checked, {report.informative} non-zero, "
                  f"{report.skipped_nonsmooth} skipped at kinks)")
            return 0 if report.passed else EXIT_GRADCHECK
        os.makedirs(cfg.out_dir, exist_ok=True)
        if args.command == "synth":
            cmd_synth(run)
        elif args.command == "train-encoder":
            cmd_train_encoder(run)
        elif args.command == "extract":
            cmd_extract(run)
        elif args.command == "train-agg":
            cmd_train_agg(run, cfg.variant)
        elif args.command == "predict":
            cmd_predict(run, cfg.variant)
        elif args.command == "eval":
            cmd_eval(run, args.variant and cfg.variant)
        elif args.command == "pipeline":
            cmd_pipeline(run)
    except MissingArtifact as exc:
        print(f"error: missing artifact: {exc.path}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as exc:
        print(f"error: invalid config field '{exc.field}': {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
