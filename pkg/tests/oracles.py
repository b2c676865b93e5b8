"""Brute-force loop oracles for the metric suite.

Written independently of ``dbr.metrics``: every sum is formed exactly with
``fractions.Fraction`` and rounded once to a float, which is the documented
convention (correctly rounded sums, then a single division by the count).
No numpy, no ``math.fsum``.
"""

from fractions import Fraction
import math


def exact_sum(values):
    total = Fraction(0)
    for v in values:
        total += Fraction(v)
    return float(total)


def mae(pred, truth):
    diffs = []
    for i in range(len(pred)):
        diffs.append(abs(float(pred[i]) - float(truth[i])))
    return exact_sum(diffs) / len(diffs)


def corr(pred, truth):
    n = len(pred)
    mp = exact_sum(pred) / n
    mt = exact_sum(truth) / n
    dp = [float(pred[i]) - mp for i in range(n)]
    dt = [float(truth[i]) - mt for i in range(n)]
    sxy = exact_sum([dp[i] * dt[i] for i in range(n)])
    sxx = exact_sum([dp[i] * dp[i] for i in range(n)])
    syy = exact_sum([dt[i] * dt[i] for i in range(n)])
    if sxx == 0.0 or syy == 0.0:
        return 0.0
    r = sxy / math.sqrt(sxx * syy)
    if r > 1.0:
        return 1.0
    if r < -1.0:
        return -1.0
    return r


def acc2(pred, truth):
    hits = 0
    count = 0
    for i in range(len(truth)):
        if truth[i] == 0:
            continue
        count += 1
        if (pred[i] >= 0) == (truth[i] >= 0):
            hits += 1
    return hits / count


def seven(x):
    # round half away from zero, then clamp to [-3, 3]
    if x >= 0:
        r = math.floor(x + 0.5)
    else:
        r = -math.floor(-x + 0.5)
    if r > 3:
        r = 3
    if r < -3:
        r = -3
    return int(r)


def acc7(pred, truth):
    hits = 0
    for i in range(len(truth)):
        if seven(pred[i]) == seven(truth[i]):
            hits += 1
    return hits / len(truth)


def binary_f1(pred_labels, truth_labels, positive=1):
    tp = fp = fn = 0
    for p, t in zip(pred_labels, truth_labels):
        if p == positive and t == positive:
            tp += 1
        elif p == positive:
            fp += 1
        elif t == positive:
            fn += 1
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def f1_from_scores(pred, truth):
    pl, tl = [], []
    for i in range(len(truth)):
        if truth[i] == 0:
            continue
        pl.append(1 if pred[i] >= 0 else 0)
        tl.append(1 if truth[i] >= 0 else 0)
    return binary_f1(pl, tl)
