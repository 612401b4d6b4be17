"""Tissue masking, N x M feature-grid assembly and balanced grid sampling."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np


@dataclass
class FeatureGrid:
    data: np.ndarray          # (N, M, D)
    origin: tuple             # (slide_id, row0, col0)
    mask: np.ndarray          # (N, M) bool, True where a patch feature was placed


@dataclass
class LabelGrid:
    labels: np.ndarray        # (N, M) in {0, 1}
    origin: tuple


def tissue_score(image):
    """Per-pixel tissue evidence in [0, 1]: ``max(1 - mean(rgb), max(rgb) - min(rgb))``.

    White background scores near 0; stained or dark tissue scores high.
    """
    img = np.asarray(image, dtype=np.float32)
    if np.asarray(image).dtype == np.uint8:
        img = img / 255.0
    darkness = 1.0 - img.mean(axis=-1)
    chroma = img.max(axis=-1) - img.min(axis=-1)
    return np.maximum(darkness, chroma)


def tissue_mask(image, patch_size, threshold=0.15):
    """Boolean patch lattice: a patch is tissue iff its mean tissue score exceeds ``threshold``."""
    score = tissue_score(image)
    rows, cols = score.shape[0] // patch_size, score.shape[1] // patch_size
    score = score[:rows * patch_size, :cols * patch_size]
    per_patch = score.reshape(rows, patch_size, cols, patch_size).mean(axis=(1, 3))
    return per_patch > threshold


def _origins(extent, n, stride):
    count = math.ceil(max(extent - n, 0) / stride) + 1
    return [k * stride for k in range(count)]


def assemble_grids(coords, features, labels=None, n=8, m=8, stride=None, slide_id="",
                   lattice_shape=None, keep_empty=False):
    """Pack per-patch features into row-major N x M grids.

    ``coords`` is (P, 2) lattice (row, col); cells without a feature are
    zero-filled and masked out.  Grids with no feature at all are dropped
    unless ``keep_empty``.
    """
    stride = n if stride is None else stride
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    features = np.asarray(features)
    if len(coords) != len(features):
        raise ValueError(f"{len(coords)} coordinates for {len(features)} feature vectors")
    if len(coords) == 0:
        return []
    if lattice_shape is None:
        lattice_shape = (int(coords[:, 0].max()) + 1, int(coords[:, 1].max()) + 1)
    rows, cols = lattice_shape
    index = np.full((rows, cols), -1, dtype=np.int64)
    for k, (r, c) in enumerate(coords):
        if index[r, c] >= 0:
            raise ValueError(f"duplicate patch coordinate ({r}, {c})")
        index[r, c] = k
    d = features.shape[1]
    lab = None if labels is None else np.asarray(labels)
    padded = np.full((rows + n, cols + m), -1, dtype=np.int64)
    padded[:rows, :cols] = index
    out = []
    for r0 in _origins(rows, n, stride):
        for c0 in _origins(cols, m, stride):
            idx = padded[r0:r0 + n, c0:c0 + m]
            mask = idx >= 0
            if not mask.any() and not keep_empty:
                continue
            data = np.zeros((n, m, d), dtype=features.dtype)
            data[mask] = features[idx[mask]]
            origin = (slide_id, r0, c0)
            grid_labels = np.zeros((n, m), dtype=np.int8)
            if lab is not None:
                grid_labels[mask] = lab[idx[mask]]
            out.append((FeatureGrid(data, origin, mask), LabelGrid(grid_labels, origin)))
    return out


def positive_cells(pair):
    grid, labels = pair
    return int(labels.labels[grid.mask].sum())


def balanced_sample(pairs, seed):
    """All grids with >= 1 tumour cell plus as many tumour-free grids, shuffled."""
    rng = np.random.default_rng(seed)
    pos = [k for k, p in enumerate(pairs) if positive_cells(p) > 0]
    neg = [k for k, p in enumerate(pairs) if positive_cells(p) == 0]
    if not pos:
        warnings.warn("balanced_sample: no grid contains a tumour cell; returning nothing")
        return []
    if len(neg) < len(pos):
        warnings.warn(f"balanced_sample: only {len(neg)} tumour-free grids for {len(pos)} positive grids")
        chosen = neg
    else:
        chosen = sorted(rng.choice(neg, size=len(pos), replace=False).tolist())
    picked = np.array(pos + chosen)
    rng.shuffle(picked)
    return [pairs[k] for k in picked]


def stack_pairs(pairs):
    """Arrays ``(X (G, N, M, D), Y (G, N, M), mask (G, N, M))`` for training."""
    x = np.stack([g.data for g, _ in pairs])
    y = np.stack([lab.labels for _, lab in pairs]).astype(np.int64)
    mask = np.stack([g.mask for g, _ in pairs])
    return x, y, mask


def manifest_lines(pairs):
    lines = []
    for grid, labels in pairs:
        slide_id, r0, c0 = grid.origin
        n, m = grid.mask.shape
        lines.append(f"{slide_id},{r0},{c0},{n},{m},{positive_cells((grid, labels))}")
    return lines
