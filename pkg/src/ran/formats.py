"""Binary feature / grid files and mask images.

Feature block (little-endian)::

    b"RANFEAT1"
    u32 slide_id_len, slide_id (UTF-8)
    u32 N, u32 M, u32 D
    u64 record_count
    record_count x (i32 row, i32 col, D x f32), row-major order

A grid file is a sequence of grid records, each a feature block whose
N x M is the grid extent and whose coordinates are grid-local, followed by::

    b"RANLBL01"
    i32 row0, i32 col0
    N*M x u8 label, N*M x u8 mask

Probability maps are written as ``.npy`` (float32, one value per patch) next
to an 8-bit PGM rendering.
"""

from __future__ import annotations

import struct

import numpy as np
from PIL import Image

from .grids import FeatureGrid, LabelGrid

FEAT_MAGIC = b"RANFEAT1"
LABEL_MAGIC = b"RANLBL01"


class FormatError(ValueError):
    pass


def _feature_block(slide_id, n, m, coords, feats):
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    feats = np.asarray(feats, dtype=np.float32)
    order = np.lexsort((coords[:, 1], coords[:, 0]))
    d = feats.shape[1] if feats.ndim == 2 else 0
    rec = np.empty(len(order), dtype=[("row", "<i4"), ("col", "<i4"), ("v", "<f4", (d,))])
    rec["row"] = coords[order, 0]
    rec["col"] = coords[order, 1]
    rec["v"] = feats[order]
    raw = slide_id.encode("utf-8")
    head = FEAT_MAGIC + struct.pack("<I", len(raw)) + raw + struct.pack("<IIIQ", n, m, d, len(order))
    return head + rec.tobytes()


def _read_feature_block(buf, pos):
    if buf[pos:pos + 8] != FEAT_MAGIC:
        raise FormatError(f"expected RANFEAT1 at byte {pos}, found {buf[pos:pos + 8]!r}")
    pos += 8
    (slen,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    slide_id = buf[pos:pos + slen].decode("utf-8")
    pos += slen
    n, m, d, count = struct.unpack_from("<IIIQ", buf, pos)
    pos += 20
    dt = np.dtype([("row", "<i4"), ("col", "<i4"), ("v", "<f4", (d,))])
    rec = np.frombuffer(buf, dt, count, pos)
    pos += dt.itemsize * count
    coords = np.stack([rec["row"], rec["col"]], axis=1).astype(np.int64)
    feats = np.array(rec["v"], dtype=np.float32).reshape(count, d)
    return slide_id, (n, m), coords, feats, pos


def write_features(path, slide_id, lattice_shape, coords, feats):
    with open(path, "wb") as fh:
        fh.write(_feature_block(slide_id, lattice_shape[0], lattice_shape[1], coords, feats))


def read_features(path):
    """Returns ``(slide_id, lattice_shape, coords, features)``."""
    with open(path, "rb") as fh:
        buf = fh.read()
    slide_id, shape, coords, feats, pos = _read_feature_block(buf, 0)
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return slide_id, shape, coords, feats


def write_grids(path, pairs):
    chunks = []
    for grid, labels in pairs:
        slide_id, r0, c0 = grid.origin
        n, m = grid.mask.shape
        local = np.argwhere(grid.mask)
        chunks.append(_feature_block(slide_id, n, m, local, grid.data[grid.mask]))
        chunks.append(LABEL_MAGIC + struct.pack("<ii", r0, c0))
        chunks.append(labels.labels.astype(np.uint8).tobytes())
        chunks.append(grid.mask.astype(np.uint8).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def read_grids(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    pos = 0
    pairs = []
    while pos < len(buf):
        slide_id, (n, m), local, feats, pos = _read_feature_block(buf, pos)
        if buf[pos:pos + 8] != LABEL_MAGIC:
            raise FormatError(f"{path}: missing label section at byte {pos}")
        r0, c0 = struct.unpack_from("<ii", buf, pos + 8)
        pos += 16
        labels = np.frombuffer(buf, np.uint8, n * m, pos).reshape(n, m).astype(np.int8)
        pos += n * m
        mask = np.frombuffer(buf, np.uint8, n * m, pos).reshape(n, m).astype(bool)
        pos += n * m
        data = np.zeros((n, m, feats.shape[1]), dtype=np.float32)
        data[local[:, 0], local[:, 1]] = feats
        origin = (slide_id, r0, c0)
        pairs.append((FeatureGrid(data, origin, mask), LabelGrid(labels, origin)))
    return pairs


def write_pgm(path, values):
    """Grayscale PGM (maxval 255) of values in [0, 1]."""
    img = np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path, format="PPM")


def read_pgm(path):
    return np.asarray(Image.open(path))


def write_ppm(path, rgb):
    Image.fromarray(np.asarray(rgb, dtype=np.uint8), mode="RGB").save(path, format="PPM")


def read_ppm(path):
    return np.asarray(Image.open(path).convert("RGB"))
