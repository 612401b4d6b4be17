"""Synthetic slides where single patches are ambiguous but context is not.

Tumour regions are unions of random ellipses ("blobs") placed on a
rectangular tissue region; a patch is tumour iff its centre lies inside a
blob and inside the tissue.  Each tissue patch is painted with the texture
of its class, except that with probability ``alpha`` it gets the other
class's texture.  A patch-only classifier can therefore at best recover the
painted texture, while neighbours reveal the true label.

Geometry record format (one item per line, patch units, half-open ranges)::

    lattice <rows> <cols>
    tissue <row0> <col0> <row1> <col1>
    blob <centre_row> <centre_col> <semi_axis_a> <semi_axis_b> <angle_rad>
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np

from .formats import read_ppm, write_ppm
from .params import rng_for

STROMA_RGB = np.array([0.90, 0.62, 0.78])
TUMOUR_RGB = np.array([0.55, 0.30, 0.62])
BACKGROUND_RGB = np.array([0.96, 0.96, 0.96])


@dataclass(frozen=True)
class SynthConfig:
    rows: int = 32
    cols: int = 32
    patch_px: int = 32
    blob_count: int = 3
    radius_range: tuple = (3.0, 7.0)
    alpha: float = 0.3
    noise: float = 0.06
    jitter: float = 0.04
    max_margin: int = 3
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.alpha < 0.5:
            raise ValueError(f"alpha must lie in [0, 0.5), got {self.alpha}")
        if min(self.rows, self.cols, self.patch_px) < 1:
            raise ValueError("slide and patch sizes must be >= 1")
        if self.blob_count < 0:
            raise ValueError("blob_count must be >= 0")


@dataclass
class Slide:
    slide_id: str
    image: np.ndarray           # (rows*px, cols*px, 3) uint8
    labels: np.ndarray          # (rows, cols) int8
    texture: np.ndarray         # (rows, cols) int8, class whose texture was painted
    tissue: np.ndarray          # (rows, cols) bool, geometric tissue region
    geometry: dict = field(default_factory=dict)

    @property
    def lattice_shape(self):
        return self.labels.shape


def labels_from_geometry(geometry):
    rows, cols = geometry["lattice"]
    r0, c0, r1, c1 = geometry["tissue"]
    rr, cc = np.meshgrid(np.arange(rows) + 0.5, np.arange(cols) + 0.5, indexing="ij")
    tissue = (rr >= r0) & (rr < r1) & (cc >= c0) & (cc < c1)
    inside = np.zeros((rows, cols), dtype=bool)
    for cy, cx, a, b, theta in geometry["blobs"]:
        dy, dx = rr - cy, cc - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        inside |= (u / a) ** 2 + (v / b) ** 2 <= 1.0
    return (inside & tissue).astype(np.int8), tissue


def generate_slide(config, index=0):
    rng = rng_for(config.seed, f"slide{index}")
    rows, cols, px = config.rows, config.cols, config.patch_px
    margins = rng.integers(0, config.max_margin + 1, size=4)
    r0, c0 = int(margins[0]), int(margins[1])
    r1, c1 = rows - int(margins[2]), cols - int(margins[3])
    if r1 <= r0:
        r0, r1 = 0, rows
    if c1 <= c0:
        c0, c1 = 0, cols
    lo, hi = config.radius_range
    blobs = []
    for _ in range(config.blob_count):
        cy = float(rng.uniform(r0, r1))
        cx = float(rng.uniform(c0, c1))
        a, b = (float(v) for v in rng.uniform(lo, hi, size=2))
        theta = float(rng.uniform(0, np.pi))
        blobs.append((cy, cx, a, b, theta))
    geometry = {"lattice": (rows, cols), "tissue": (r0, c0, r1, c1), "blobs": blobs}
    labels, tissue = labels_from_geometry(geometry)

    flip = rng.random((rows, cols)) < config.alpha
    texture = np.where(tissue, labels ^ flip, 0).astype(np.int8)
    base = np.where(texture[..., None] == 1, TUMOUR_RGB, STROMA_RGB)
    base = base + rng.uniform(-config.jitter, config.jitter, size=(rows, cols, 3))
    base = np.where(tissue[..., None], base, BACKGROUND_RGB)
    noise = np.where(np.repeat(np.repeat(tissue, px, 0), px, 1)[..., None], config.noise, 0.01)
    pixels = np.repeat(np.repeat(base, px, axis=0), px, axis=1)
    pixels = pixels + noise * rng.standard_normal(pixels.shape)
    image = np.clip(np.rint(pixels * 255.0), 0, 255).astype(np.uint8)
    return Slide(f"slide{index:03d}", image, labels, texture, tissue, geometry)


def patch_view(image, patch_px):
    """(rows, cols, px, px, 3) view of a slide image."""
    h, w, ch = image.shape
    rows, cols = h // patch_px, w // patch_px
    img = image[:rows * patch_px, :cols * patch_px]
    return img.reshape(rows, patch_px, cols, patch_px, ch).swapaxes(1, 2)


def slide_patches(slide, patch_px, mask=None):
    """``(coords (P, 2), pixels (P, px, px, 3) uint8, labels (P,))`` for masked-in patches."""
    mask = slide.tissue if mask is None else mask
    coords = np.argwhere(mask)
    view = patch_view(slide.image, patch_px)
    return coords, view[coords[:, 0], coords[:, 1]], slide.labels[coords[:, 0], coords[:, 1]]


@dataclass
class Bundle:
    train: list
    val: list
    manifest: list

    def all_slides(self):
        return sorted(self.train + self.val, key=lambda s: s.slide_id)


def dataset_bundle(config, slide_count, split=0.8):
    """Generate ``slide_count`` slides and split them by slide, not by patch."""
    if slide_count < 2:
        raise ValueError(f"slide_count must be >= 2, got {slide_count}")
    n_train = int(round(split * slide_count))
    if n_train <= 0 or n_train >= slide_count:
        raise ValueError(f"split {split} of {slide_count} slides leaves one side empty")
    order = rng_for(config.seed, "split").permutation(slide_count)
    train_idx = set(order[:n_train].tolist())
    train, val, manifest = [], [], []
    for k in range(slide_count):
        slide = generate_slide(config, k)
        side = "train" if k in train_idx else "val"
        (train if side == "train" else val).append(slide)
        manifest.append((slide.slide_id, side, int(slide.tissue.sum()), int(slide.labels.sum())))
    return Bundle(train, val, manifest)


def write_geometry(path, geometry):
    rows, cols = geometry["lattice"]
    lines = [f"lattice {rows} {cols}", "tissue {} {} {} {}".format(*geometry["tissue"])]
    lines += ["blob {!r} {!r} {!r} {!r} {!r}".format(*b) for b in geometry["blobs"]]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_geometry(path):
    geometry = {"blobs": []}
    with open(path) as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "lattice":
                geometry["lattice"] = (int(parts[1]), int(parts[2]))
            elif parts[0] == "tissue":
                geometry["tissue"] = tuple(int(v) for v in parts[1:5])
            elif parts[0] == "blob":
                geometry["blobs"].append(tuple(float(v) for v in parts[1:6]))
    return geometry


def write_labels_csv(path, slide):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("row", "col", "label", "texture", "tissue"))
        rows, cols = slide.labels.shape
        for r in range(rows):
            for c in range(cols):
                w.writerow((r, c, int(slide.labels[r, c]), int(slide.texture[r, c]), int(slide.tissue[r, c])))


def read_labels_csv(path, shape):
    labels = np.zeros(shape, dtype=np.int8)
    texture = np.zeros(shape, dtype=np.int8)
    tissue = np.zeros(shape, dtype=bool)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            r, c = int(row["row"]), int(row["col"])
            labels[r, c] = int(row["label"])
            texture[r, c] = int(row["texture"])
            tissue[r, c] = row["tissue"] == "1"
    return labels, texture, tissue


def save_slide(slide, directory):
    os.makedirs(directory, exist_ok=True)
    write_ppm(os.path.join(directory, f"{slide.slide_id}.ppm"), slide.image)
    write_labels_csv(os.path.join(directory, f"{slide.slide_id}_labels.csv"), slide)
    write_geometry(os.path.join(directory, f"{slide.slide_id}_geometry.txt"), slide.geometry)


def load_slide(directory, slide_id):
    geometry = read_geometry(os.path.join(directory, f"{slide_id}_geometry.txt"))
    image = read_ppm(os.path.join(directory, f"{slide_id}.ppm"))
    labels, texture, tissue = read_labels_csv(
        os.path.join(directory, f"{slide_id}_labels.csv"), geometry["lattice"])
    return Slide(slide_id, image, labels, texture, tissue, geometry)
