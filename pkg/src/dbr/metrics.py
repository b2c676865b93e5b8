"""Sentiment-regression and classification metrics.

Rounding conventions are fixed so independent re-implementations agree
bit for bit: every sum is a correctly rounded ``math.fsum``, means are that
sum divided by the count, and half-integers round away from zero.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

ACC2_MODES = ("neg-vs-nonneg-excl-zero", "neg-vs-pos-only")


def _pair(pred, truth) -> tuple[list[float], list[float]]:
    p = [float(x) for x in np.asarray(pred, dtype=float).ravel()]
    t = [float(x) for x in np.asarray(truth, dtype=float).ravel()]
    if len(p) != len(t):
        raise ValueError(f"length mismatch: {len(p)} predictions vs {len(t)} targets")
    return p, t


def mae(pred, truth) -> float:
    p, t = _pair(pred, truth)
    if not p:
        raise ValueError("mae of empty input")
    return math.fsum(abs(a - b) for a, b in zip(p, t)) / len(p)


def pearson_corr(pred, truth) -> float:
    """Sample Pearson r; 0.0 (with a warning) when either side is constant."""
    p, t = _pair(pred, truth)
    n = len(p)
    if n < 2:
        raise ValueError("correlation needs at least two points")
    mp = math.fsum(p) / n
    mt = math.fsum(t) / n
    dp = [a - mp for a in p]
    dt = [b - mt for b in t]
    sxy = math.fsum(a * b for a, b in zip(dp, dt))
    sxx = math.fsum(a * a for a in dp)
    syy = math.fsum(b * b for b in dt)
    if sxx == 0.0 or syy == 0.0:
        warnings.warn("constant input to pearson_corr; returning 0", RuntimeWarning, stacklevel=2)
        return 0.0
    r = sxy / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def _binary_pairs(pred, truth, mode: str) -> tuple[list[bool], list[bool]]:
    """(predicted non-negative, true non-negative) after the Acc-2 exclusions."""
    if mode not in ACC2_MODES:
        raise ValueError(f"unknown acc2 mode {mode!r}")
    p, t = _pair(pred, truth)
    keep = [i for i in range(len(t)) if t[i] != 0.0]
    if mode == "neg-vs-pos-only":
        keep = [i for i in keep if p[i] != 0.0]
    return [p[i] >= 0.0 for i in keep], [t[i] >= 0.0 for i in keep]


def acc2(pred, truth, mode: str = ACC2_MODES[0]) -> float:
    """Binary sign accuracy over samples with non-zero truth."""
    pb, tb = _binary_pairs(pred, truth, mode)
    if not tb:
        raise ValueError("acc2 undefined: every target is zero")
    return sum(a == b for a, b in zip(pb, tb)) / len(tb)


def round_half_away(x: float) -> float:
    return math.copysign(math.floor(abs(x) + 0.5), x)


def to_seven_class(x: float) -> int:
    return int(min(3.0, max(-3.0, round_half_away(x))))


def acc7(pred, truth) -> float:
    p, t = _pair(pred, truth)
    if not p:
        raise ValueError("acc7 of empty input")
    return sum(to_seven_class(a) == to_seven_class(b) for a, b in zip(p, t)) / len(p)


def precision_recall_f1(pred_labels: Sequence, truth_labels: Sequence, average: str = "binary", positive=1):
    """Precision, recall and F1.

    ``average`` is ``"binary"`` (class ``positive`` only), ``"weighted"``
    (support-weighted mean over true classes) or ``"macro"``.  Undefined
    ratios are 0.
    """
    pl = list(np.asarray(pred_labels).ravel().tolist())
    tl = list(np.asarray(truth_labels).ravel().tolist())
    if len(pl) != len(tl):
        raise ValueError("length mismatch")
    if not tl:
        raise ValueError("empty label set")

    def one(c):
        tp = sum(1 for a, b in zip(pl, tl) if a == c and b == c)
        fp = sum(1 for a, b in zip(pl, tl) if a == c and b != c)
        fn = sum(1 for a, b in zip(pl, tl) if a != c and b == c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        return prec, rec, f, tp + fn

    if average == "binary":
        prec, rec, f, support = one(positive)
        if support == 0 and not any(a == positive for a in pl):
            warnings.warn("no positive predictions or targets; F1 defined as 0", RuntimeWarning, stacklevel=2)
        return prec, rec, f
    classes = sorted(set(tl) | set(pl))
    stats = [one(c) for c in classes]
    if average == "macro":
        k = len(stats)
        return tuple(math.fsum(s[i] for s in stats) / k for i in range(3))
    if average == "weighted":
        n = len(tl)
        return tuple(math.fsum(s[i] * s[3] for s in stats) / n for i in range(3))
    raise ValueError(f"unknown averaging {average!r}")


def f1(pred_labels, truth_labels, average: str = "binary", positive=1) -> float:
    return precision_recall_f1(pred_labels, truth_labels, average, positive)[2]


def binary_f1_from_scores(pred, truth, mode: str = ACC2_MODES[0]) -> float:
    pb, tb = _binary_pairs(pred, truth, mode)
    if not tb:
        raise ValueError("F1 undefined: every target is zero")
    return f1([int(x) for x in pb], [int(x) for x in tb], "binary", 1)


@dataclass
class MetricReport:
    mae: float | None = None
    corr: float | None = None
    acc2: float | None = None
    acc7: float | None = None
    f1: float | None = None
    acc: float | None = None
    precision: float | None = None
    recall: float | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


REGRESSION_COLUMNS = ("mae", "corr", "acc2", "acc7", "f1")
CLASSIFICATION_COLUMNS = ("acc", "f1", "precision", "recall")


def regression_report(pred, truth, acc2_mode: str = ACC2_MODES[0]) -> MetricReport:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return MetricReport(
            mae=mae(pred, truth),
            corr=pearson_corr(pred, truth),
            acc2=acc2(pred, truth, acc2_mode),
            acc7=acc7(pred, truth),
            f1=binary_f1_from_scores(pred, truth, acc2_mode),
        )


def classification_report(pred_labels, truth_labels, average: str = "weighted") -> MetricReport:
    pl = np.asarray(pred_labels).ravel()
    tl = np.asarray(truth_labels).ravel()
    prec, rec, f = precision_recall_f1(pl, tl, average)
    return MetricReport(acc=float(sum(int(a == b) for a, b in zip(pl, tl)) / len(tl)), f1=f, precision=prec, recall=rec)
