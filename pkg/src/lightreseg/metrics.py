"""Confusion-matrix segmentation metrics and the Wilcoxon rank-sum test.

Per class ``c`` with ``TP = cm[c, c]``, ``FP = colsum - TP``, ``FN = rowsum - TP``
and ``TN = total - TP - FP - FN``::

    dsc = 2TP / (2TP + FP + FN)
    iou = TP / (TP + FP + FN)
    pa  = (TP + TN) / total

``miou`` and ``mpa`` average over all ``k + 1`` classes, background included.
"""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.stats import norm, rankdata

from .errors import DataError


def confusion(pred, true, num_classes: int) -> np.ndarray:
    """``(K, K)`` int64 tally; entry ``(i, j)`` counts true ``i`` predicted as ``j``."""
    pred = np.asarray(pred)
    true = np.asarray(true)
    if pred.shape != true.shape:
        raise DataError(f"mask shapes differ: {pred.shape} vs {true.shape}")
    for name, m in (("prediction", pred), ("target", true)):
        if m.size and (m.min() < 0 or m.max() >= num_classes):
            raise DataError(f"{name} has labels outside [0, {num_classes})")
    idx = true.astype(np.int64).ravel() * num_classes + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def class_counts(cm: np.ndarray):
    """``(TP, FP, FN, TN)`` integer vectors."""
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = cm.sum() - tp - fp - fn
    return tp, fp, fn, tn


@dataclass
class MetricsReport:
    dsc: np.ndarray
    iou: np.ndarray
    pa: np.ndarray
    recall: np.ndarray
    miou: float
    mpa: float
    k: int
    present: np.ndarray = field(repr=False)
    class_names: tuple[str, ...] | None = None

    @property
    def mdsc(self) -> float:
        return float(np.mean(self.dsc))

    def names(self) -> list[str]:
        if self.class_names is not None:
            return list(self.class_names)
        return [f"class{i}" for i in range(self.k)]

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "classes": [
                {"name": n, "dsc": float(d), "iou": float(i), "pa": float(p),
                 "recall": float(r), "present": bool(s)}
                for n, d, i, p, r, s in zip(self.names(), self.dsc, self.iou, self.pa,
                                            self.recall, self.present)
            ],
            "miou": self.miou,
            "mpa": self.mpa,
            "mdsc": self.mdsc,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_text(self) -> str:
        width = max(8, *(len(n) for n in self.names()))
        lines = [f"{'class':<{width}}  {'dsc':>7}  {'pa':>7}"]
        for n, d, p in zip(self.names(), self.dsc, self.pa):
            lines.append(f"{n:<{width}}  {d:7.4f}  {p:7.4f}")
        lines.append(f"{'miou':<{width}}  {self.miou:7.4f}")
        lines.append(f"{'mpa':<{width}}  {self.mpa:7.4f}")
        return "\n".join(lines) + "\n"


def metrics(cm, exclude_absent: bool = False, class_names=None) -> MetricsReport:
    """Metrics from a confusion matrix.

    A class with ``TP + FP + FN == 0`` scores dsc = iou = 1. With
    ``exclude_absent`` such classes are left out of ``miou``/``mpa``.
    ``recall`` (``TP / (TP + FN)``) is a supplementary per-class accuracy that
    ignores true negatives.
    """
    cm = np.asarray(cm, dtype=np.int64)
    k = cm.shape[0]
    tp, fp, fn, tn = class_counts(cm)
    total = int(cm.sum())
    support = tp + fp + fn
    present = support > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        dsc = np.where(present, 2 * tp / np.maximum(2 * tp + fp + fn, 1), 1.0)
        iou = np.where(present, tp / np.maximum(support, 1), 1.0)
        pa = (tp + tn) / total if total else np.ones(k)
        recall = np.where(tp + fn > 0, tp / np.maximum(tp + fn, 1), 1.0)
    keep = present if exclude_absent and present.any() else np.ones(k, dtype=bool)
    return MetricsReport(dsc=dsc.astype(np.float64), iou=iou.astype(np.float64),
                         pa=np.asarray(pa, dtype=np.float64), recall=recall.astype(np.float64),
                         miou=float(iou[keep].mean()), mpa=float(np.asarray(pa)[keep].mean()),
                         k=k, present=present, class_names=class_names)


def exact_ratios(cm) -> dict[str, list[Fraction]]:
    """Per-class dsc/iou/pa as exact fractions, for comparison against counting oracles."""
    tp, fp, fn, tn = class_counts(cm)
    total = int(np.asarray(cm).sum())
    out = {"dsc": [], "iou": [], "pa": []}
    for c in range(len(tp)):
        t, f_p, f_n, t_n = int(tp[c]), int(fp[c]), int(fn[c]), int(tn[c])
        s = t + f_p + f_n
        out["dsc"].append(Fraction(2 * t, 2 * t + f_p + f_n) if s else Fraction(1))
        out["iou"].append(Fraction(t, s) if s else Fraction(1))
        out["pa"].append(Fraction(t + t_n, total) if total else Fraction(1))
    return out


def per_image_dice(preds, trues, num_classes: int) -> np.ndarray:
    """``(N, K)`` Dice per image and class; feeds the rank-sum comparison."""
    return np.stack([metrics(confusion(p, t, num_classes)).dsc for p, t in zip(preds, trues)])


def wilcoxon_rank_sum(a, b, exact_max: int = 20, tol: float = 1e-12) -> float:
    """Two-sided Wilcoxon rank-sum p-value with midranks for ties.

    Exact by enumerating every ``C(n_a + n_b, n_a)`` relabelling when
    ``n_a + n_b <= exact_max``; otherwise a tie-corrected normal approximation.
    """
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    na, nb = a.size, b.size
    n = na + nb
    ranks = rankdata(np.concatenate([a, b]))
    w_obs = ranks[:na].sum()
    mean = na * (n + 1) / 2.0
    dev = abs(w_obs - mean)
    if n <= exact_max:
        total = 0
        extreme = 0
        for idx in itertools.combinations(range(n), na):
            w = ranks[list(idx)].sum()
            total += 1
            if abs(w - mean) >= dev - tol:
                extreme += 1
        return extreme / total
    _, counts = np.unique(ranks, return_counts=True)
    tie = float(np.sum(counts ** 3 - counts))
    var = na * nb / 12.0 * ((n + 1) - tie / (n * (n - 1)))
    if var <= 0:
        return 1.0
    z = dev / math.sqrt(var)
    return float(min(1.0, 2.0 * norm.sf(z)))
