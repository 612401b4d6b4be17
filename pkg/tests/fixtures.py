"""Small deterministic data shared by several test modules."""

import numpy as np


def overfit_grids(count=50, n=6, m=6, d=8, flip=0.15, seed=0):
    """``count`` grids whose labels are a random disc per grid.

    Features carry the label along one random direction plus Gaussian noise;
    a ``flip`` fraction of cells point the wrong way, so fitting every cell
    needs the neighbourhood (or memorisation), not just a per-cell rule.
    """
    rng = np.random.default_rng(seed)
    direction = rng.standard_normal(d)
    direction /= np.linalg.norm(direction)
    rr, cc = np.meshgrid(np.arange(n), np.arange(m), indexing="ij")
    labels = np.zeros((count, n, m), dtype=np.int64)
    for k in range(count):
        cy, cx = rng.uniform(0, n), rng.uniform(0, m)
        r = rng.uniform(1.0, 3.0)
        labels[k] = (rr - cy) ** 2 + (cc - cx) ** 2 <= r * r
    noise = rng.standard_normal((count, n, m, d))
    noise -= (noise @ direction)[..., None] * direction
    sign = np.where(labels == 1, 1.0, -1.0)
    sign = np.where(rng.random(labels.shape) < flip, -sign, sign)
    along = sign * rng.uniform(0.5, 1.5, labels.shape)
    x = noise * 0.5 + along[..., None] * direction
    return x, labels, direction
