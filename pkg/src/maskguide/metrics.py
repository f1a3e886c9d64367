"""Classification, overlap and paired-significance metrics.

Undefined quantities (a rate with an empty denominator, AUC on one class, a
Wilcoxon test with no non-zero differences) are reported as ``None`` rather
than NaN so they cannot leak into averages unnoticed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import InvalidInputError

EXACT_MAX_N = 25


@dataclass
class ConfusionMetrics:
    acc: float
    tpr: Optional[float]
    tnr: Optional[float]
    tp: int
    tn: int
    fp: int
    fn: int


def _pair(probs, labels):
    p = np.asarray(probs, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(int)
    if p.shape != y.shape:
        raise InvalidInputError(f"{p.size} probabilities vs {y.size} labels")
    return p, y


def confusion_metrics(probs, labels, threshold: float = 0.5) -> ConfusionMetrics:
    p, y = _pair(probs, labels)
    if p.size == 0:
        raise InvalidInputError("no predictions")
    pred = p >= threshold
    pos = y == 1
    tp = int(np.sum(pred & pos))
    tn = int(np.sum(~pred & ~pos))
    fp = int(np.sum(pred & ~pos))
    fn = int(np.sum(~pred & pos))
    n_pos, n_neg = tp + fn, tn + fp
    return ConfusionMetrics(
        acc=(tp + tn) / p.size,
        tpr=tp / n_pos if n_pos else None,
        tnr=tn / n_neg if n_neg else None,
        tp=tp, tn=tn, fp=fp, fn=fn,
    )


def auc(probs, labels) -> Optional[float]:
    """Area under the ROC curve via the normalised Mann-Whitney U statistic."""
    p, y = _pair(probs, labels)
    n_pos = int(np.sum(y == 1))
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(p)
    u = ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def dice_iou(a, b) -> tuple:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise InvalidInputError(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = int(np.sum(a & b))
    sa, sb = int(a.sum()), int(b.sum())
    union = sa + sb - inter
    if union == 0:
        return 1.0, 1.0
    return 2.0 * inter / (sa + sb), inter / union


# --------------------------------------------------------------------------- Wilcoxon


@dataclass
class WilcoxonResult:
    statistic: float
    p_value: float
    n: int
    method: str
    w_plus: float = 0.0
    w_minus: float = 0.0


def signed_rank_null(doubled_ranks: Sequence[int]) -> np.ndarray:
    """Exact null distribution of ``2 * W+`` when each rank's sign is a fair coin.

    Ranks are passed doubled so tie-averaged ranks stay integral. Entry ``s`` of
    the result is ``P(2 W+ = s)``.
    """
    total = int(sum(doubled_ranks))
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in doubled_ranks:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    return counts / 2.0 ** len(doubled_ranks)


def wilcoxon_paired(x, y, exact_max_n: int = EXACT_MAX_N) -> Optional[WilcoxonResult]:
    """Two-sided Wilcoxon signed-rank test on paired samples.

    Zero differences are dropped. Ranks of tied magnitudes are averaged. Up to
    ``exact_max_n`` non-zero pairs the p-value comes from the exact null;
    beyond that a tie-corrected normal approximation with continuity
    correction is used. Returns ``None`` when every difference is zero.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise InvalidInputError(f"paired samples differ in length: {x.size} vs {y.size}")
    d = x - y
    d = d[d != 0]
    n = d.size
    if n == 0:
        return None
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    stat = min(w_plus, w_minus)
    if n <= exact_max_n:
        doubled = np.rint(2 * ranks).astype(int)
        null = signed_rank_null(doubled)
        p = 2.0 * null[: int(round(2 * stat)) + 1].sum()
        method = "exact"
    else:
        mean = n * (n + 1) / 4.0
        _, tie_counts = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts ** 3 - tie_counts) / 48.0
        dev = abs(stat - mean) - 0.5
        p = 1.0 if dev <= 0 else math.erfc(dev / math.sqrt(var) / math.sqrt(2.0))
        method = "normal"
    return WilcoxonResult(stat, float(min(1.0, p)), n, method, w_plus, w_minus)


def significance_stars(p: Optional[float]) -> str:
    if p is None:
        return "undefined"
    if p < 0.001:
        return "***"
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return "n.s."


# --------------------------------------------------------------------------- aggregation


@dataclass
class Summary:
    values: list
    mean: Optional[float]
    se: Optional[float]
    n: int


def mean_se(values) -> Summary:
    """Mean and standard error (``n-1`` std over sqrt(n)) of the defined values."""
    defined = [float(v) for v in values if v is not None]
    n = len(defined)
    if n == 0:
        return Summary(list(values), None, None, 0)
    arr = np.asarray(defined)
    se = float(arr.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return Summary(list(values), float(arr.mean()), se, n)


@dataclass
class EvalReport:
    acc: Summary
    auc: Summary
    tpr: Summary
    tnr: Summary
    dice: Summary = field(default_factory=lambda: mean_se([]))
    iou: Summary = field(default_factory=lambda: mean_se([]))

    @classmethod
    def from_folds(cls, folds: Sequence[dict]) -> "EvalReport":
        def col(k):
            return mean_se([f.get(k) for f in folds])

        return cls(col("acc"), col("auc"), col("tpr"), col("tnr"), col("dice"), col("iou"))
