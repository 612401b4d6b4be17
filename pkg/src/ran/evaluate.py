"""Threshold-swept precision / recall / F1 and slide-level mask stitching."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

PR_FIELDS = ("threshold", "tp", "fp", "fn", "tn", "precision", "recall", "f1")


def default_thresholds():
    return np.linspace(0.0, 1.0, 101)


def _flatten(probs, labels, mask):
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if probs.shape != labels.shape:
        raise ValueError(f"probability shape {probs.shape} does not match label shape {labels.shape}")
    if mask is None:
        mask = np.ones(labels.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != labels.shape:
        raise ValueError(f"mask shape {mask.shape} does not match label shape {labels.shape}")
    return probs[mask], labels[mask].astype(bool)


def confusion_at(probs, labels, mask, threshold):
    """``(TP, FP, FN, TN)`` over masked-in cells; positive iff prob >= threshold."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    p, y = _flatten(probs, labels, mask)
    pred = p >= threshold
    tp = int(np.count_nonzero(pred & y))
    fp = int(np.count_nonzero(pred & ~y))
    fn = int(np.count_nonzero(~pred & y))
    tn = int(np.count_nonzero(~pred & ~y))
    return tp, fp, fn, tn


def prf1(tp, fp, fn):
    """Precision, recall, F1 with 0/0 -> 0."""
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    best_f1: float = 0.0
    best_threshold: float = 0.0
    cells: int = 0

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(PR_FIELDS)
            for r in self.rows:
                w.writerow([f"{r['threshold']:.6g}", r["tp"], r["fp"], r["fn"], r["tn"],
                            f"{r['precision']:.6f}", f"{r['recall']:.6f}", f"{r['f1']:.6f}"])


def pr_curve(probs, labels, mask=None, thresholds=None):
    thresholds = default_thresholds() if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    if np.any(np.diff(thresholds) < 0):
        raise ValueError("thresholds must be sorted ascending")
    p, y = _flatten(probs, labels, mask)
    report = EvalReport(cells=int(p.size))
    for t in thresholds:
        tp, fp, fn, tn = confusion_at(p, y, None, float(t))
        precision, recall, f1 = prf1(tp, fp, fn)
        report.rows.append(dict(threshold=float(t), tp=tp, fp=fp, fn=fn, tn=tn,
                                precision=precision, recall=recall, f1=f1))
        if f1 > report.best_f1:
            report.best_f1, report.best_threshold = f1, float(t)
    if report.rows and report.best_f1 == 0.0:
        report.best_threshold = report.rows[0]["threshold"]
    return report


def stitch_mask(grids, slide_shape, threshold=0.5):
    """Average per-grid probabilities onto the slide's patch lattice.

    ``grids`` is a sequence of ``((row0, col0), probs (N, M))``; cells that fall
    off the lattice are dropped.  Returns ``(prob_map, binary_mask)``, with
    uncovered cells at probability 0.
    """
    rows, cols = slide_shape
    total = np.zeros((rows, cols), dtype=np.float64)
    count = np.zeros((rows, cols), dtype=np.int64)
    for origin, probs in grids:
        r0, c0 = int(origin[-2]), int(origin[-1])
        if not (0 <= r0 < rows and 0 <= c0 < cols):
            raise ValueError(f"grid origin ({r0}, {c0}) outside slide lattice {slide_shape}")
        probs = np.asarray(probs, dtype=np.float64)
        n = min(probs.shape[0], rows - r0)
        m = min(probs.shape[1], cols - c0)
        total[r0:r0 + n, c0:c0 + m] += probs[:n, :m]
        count[r0:r0 + n, c0:c0 + m] += 1
    prob_map = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    return prob_map, (prob_map >= threshold).astype(np.uint8)
