"""Central-difference gradient checking against analytic backward passes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonDeterministicForward(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    max_rel_err: float
    tolerance: float
    checked: int
    skipped_nonsmooth: int
    per_param: dict = field(default_factory=dict)
    informative: int = 0        # compared samples whose gradient is not negligibly small

    @property
    def passed(self):
        # an all-zero gradient (e.g. every ReLU dead) would otherwise pass vacuously
        return (self.max_rel_err <= self.tolerance and self.informative > 0
                and self.skipped_nonsmooth <= 0.05 * max(self.checked, 1))


def rel_err(a, b, floor=1e-6):
    # floor keeps near-zero gradients from turning float noise into huge ratios
    return abs(a - b) / max(abs(a), abs(b), floor)


def grad_check(loss_and_grads, store, sample_count=20, tolerance=1e-4, h=1e-5, seed=0):
    """Compare analytic gradients with central differences on sampled entries.

    ``loss_and_grads(store) -> (loss, grads)`` must be deterministic; call it
    with a float64 store.  A central difference that changes by more than
    ``tolerance`` when the step is halved straddles a non-differentiable point
    (a ReLU kink); the step is then shrunk tenfold, up to twice, and a sample
    that never settles is counted as skipped rather than compared.
    """
    loss0, grads = loss_and_grads(store)
    loss1, _ = loss_and_grads(store)
    if loss0 != loss1:
        raise NonDeterministicForward(f"forward returned {loss0!r} then {loss1!r} on identical parameters")
    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = skipped = informative = 0
    per_param = {}

    def numeric(flat, idx, step):
        old = flat[idx]
        flat[idx] = old + step
        plus = loss_and_grads(store)[0]
        flat[idx] = old - step
        minus = loss_and_grads(store)[0]
        flat[idx] = old
        return (plus - minus) / (2 * step)

    for name in store.names():
        value = store.entries[name].value
        flat = value.reshape(-1)
        analytic = np.asarray(grads[name]).reshape(-1)
        n = flat.size
        picks = np.arange(n) if n <= sample_count else rng.choice(n, sample_count, replace=False)
        local = 0.0
        for idx in picks:
            for step in (h, h / 10, h / 100):
                num = numeric(flat, idx, step)
                if rel_err(num, numeric(flat, idx, step / 2)) <= tolerance:
                    break
            else:
                skipped += 1
                continue
            err = rel_err(float(analytic[idx]), num)
            local = max(local, err)
            checked += 1
            informative += max(abs(float(analytic[idx])), abs(num)) > 1e-6
        per_param[name] = local
        worst = max(worst, local)
    return GradCheckReport(worst, tolerance, checked, skipped, per_param, informative)
