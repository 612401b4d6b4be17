"""Named parameters, Adam, checkpoints and seeded random substreams.

Checkpoint layout (all integers little-endian)::

    b"RANCKPT1"
    u64 entry_count
    u64 rng_seed
    entry_count x:
        u32 name_len, name (UTF-8)
        u32 rank, rank x u64 extent
        u64 adam step count
        prod(extents) x f32 value
    b"ADAMMOM1"
    entry_count x (same order):
        prod(extents) x f32 m
        prod(extents) x f32 v

Entries are written in sorted name order.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

CKPT_MAGIC = b"RANCKPT1"
MOMENT_MAGIC = b"ADAMMOM1"


class MissingGradientError(KeyError):
    pass


class CheckpointError(ValueError):
    pass


def rng_for(seed, name):
    """Independent generator for a named substream of ``seed``."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


@dataclass
class Param:
    value: np.ndarray
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    grad: np.ndarray | None = None


@dataclass
class ParamStore:
    seed: int = 0
    entries: dict = field(default_factory=dict)

    def add(self, name, value):
        value = np.asarray(value)
        self.entries[name] = Param(value, np.zeros_like(value), np.zeros_like(value))

    def __getitem__(self, name):
        return self.entries[name].value

    def __contains__(self, name):
        return name in self.entries

    def __len__(self):
        return len(self.entries)

    def names(self):
        return sorted(self.entries)

    def values(self):
        return {name: self.entries[name].value for name in self.names()}

    def set_grads(self, grads):
        for name, g in grads.items():
            p = self.entries[name]
            if g.shape != p.value.shape:
                raise ValueError(f"gradient for {name!r} has shape {g.shape}, expected {p.value.shape}")
            p.grad = g

    def zero_grad(self):
        for p in self.entries.values():
            p.grad = None

    @property
    def dtype(self):
        return next(iter(self.entries.values())).value.dtype if self.entries else np.dtype(np.float32)

    def copy(self):
        out = ParamStore(self.seed)
        for name, p in self.entries.items():
            out.entries[name] = Param(p.value.copy(), p.m.copy(), p.v.copy(), p.step)
        return out

    def astype(self, dtype):
        out = ParamStore(self.seed)
        for name, p in self.entries.items():
            out.entries[name] = Param(p.value.astype(dtype), p.m.astype(dtype), p.v.astype(dtype), p.step)
        return out


def adam_step(store, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam update, applied in sorted name order."""
    for name in store.names():
        if store.entries[name].grad is None:
            raise MissingGradientError(f"parameter {name!r} has no gradient")
    for name in store.names():
        p = store.entries[name]
        dt = p.value.dtype.type
        g = p.grad
        p.step += 1
        p.m = dt(beta1) * p.m + dt(1 - beta1) * g
        p.v = dt(beta2) * p.v + dt(1 - beta2) * (g * g)
        m_hat = p.m / dt(1 - beta1 ** p.step)
        v_hat = p.v / dt(1 - beta2 ** p.step)
        p.value = p.value - dt(lr) * m_hat / (np.sqrt(v_hat) + dt(eps))
    return store


def save_checkpoint(store, path):
    names = store.names()
    chunks = [CKPT_MAGIC, struct.pack("<QQ", len(names), store.seed)]
    for name in names:
        p = store.entries[name]
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", p.value.ndim))
        chunks.append(struct.pack(f"<{p.value.ndim}Q", *p.value.shape))
        chunks.append(struct.pack("<Q", p.step))
        chunks.append(p.value.astype("<f4").tobytes())
    chunks.append(MOMENT_MAGIC)
    for name in names:
        p = store.entries[name]
        chunks.append(p.m.astype("<f4").tobytes())
        chunks.append(p.v.astype("<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {buf[:8]!r}")
    pos = 8
    count, seed = struct.unpack_from("<QQ", buf, pos)
    pos += 16
    store = ParamStore(int(seed))
    order = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        (step,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        n = int(np.prod(shape, dtype=np.int64))
        value = np.frombuffer(buf, "<f4", n, pos).reshape(shape).astype(np.float32)
        pos += 4 * n
        store.entries[name] = Param(value, np.zeros_like(value), np.zeros_like(value), int(step))
        order.append(name)
    if buf[pos:pos + 8] != MOMENT_MAGIC:
        raise CheckpointError(f"{path}: missing Adam moment section")
    pos += 8
    for name in order:
        p = store.entries[name]
        n = p.value.size
        p.m = np.frombuffer(buf, "<f4", n, pos).reshape(p.value.shape).astype(np.float32)
        pos += 4 * n
        p.v = np.frombuffer(buf, "<f4", n, pos).reshape(p.value.shape).astype(np.float32)
        pos += 4 * n
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return store


def check_shapes(store, expected):
    """Raise naming the first parameter whose shape disagrees with ``expected``."""
    for name, shape in expected.items():
        if name not in store:
            raise CheckpointError(f"checkpoint lacks parameter {name!r}")
        if tuple(store[name].shape) != tuple(shape):
            raise CheckpointError(
                f"parameter {name!r} has shape {tuple(store[name].shape)}, config expects {tuple(shape)}")
    extra = set(store.entries) - set(expected)
    if extra:
        raise CheckpointError(f"checkpoint has unexpected parameters {sorted(extra)}")
