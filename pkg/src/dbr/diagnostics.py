"""Branch-imbalance diagnostics over dumped representations.

SID is the normalised effective rank of shared representations, PMS is the
silhouette of private vectors grouped by modality, and the imbalance score
combines shared redundancy with private homogenisation per sample.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.stats import spearmanr

from .metrics import binary_f1_from_scores, f1

EPS = 1e-8


class DumpError(ValueError):
    """Malformed representation dump."""


@dataclass
class DumpRow:
    id: str
    label: float
    pred: float
    shared: np.ndarray  # (M, d)
    private: np.ndarray  # (M, d)


def effective_rank(singular_values: np.ndarray) -> float:
    s = np.asarray(singular_values, dtype=float)
    s = s[s > 0]
    if s.size == 0:
        return 1.0
    p = s / s.sum()
    return float(np.exp(-np.sum(p * np.log(p))))


def sid(shared: np.ndarray, center: bool = True) -> float:
    """Effective rank of the (row-centred) matrix divided by ``min(N, d)``.

    An all-zero matrix is degenerate: it returns ``1 / min(N, d)`` and warns.
    """
    x = np.asarray(shared, dtype=float)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError("sid expects a non-empty (N, d) matrix")
    if center:
        x = x - x.mean(axis=0, keepdims=True)
    bound = min(x.shape)
    sv = np.linalg.svd(x, compute_uv=False)
    if sv.size == 0 or sv[0] <= 0 or sv[0] < 1e-12 * max(1.0, np.abs(shared).max()):
        warnings.warn("degenerate all-zero matrix in sid", RuntimeWarning, stacklevel=2)
        return 1.0 / bound
    # singular values below round-off of the leading one are treated as zero
    sv = np.where(sv > sv[0] * 1e-12, sv, 0.0)
    return effective_rank(sv) / bound


def silhouette_samples(points: np.ndarray, labels: Sequence) -> np.ndarray:
    x = np.asarray(points, dtype=float)
    labels = np.asarray(labels)
    groups = np.unique(labels)
    if groups.size < 2:
        raise ValueError("silhouette needs at least two groups")
    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    out = np.zeros(len(x))
    masks = {g: labels == g for g in groups}
    for i in range(len(x)):
        own = masks[labels[i]]
        n_own = own.sum()
        if n_own <= 1:
            continue
        a = dist[i, own].sum() / (n_own - 1)
        b = min(dist[i, masks[g]].mean() for g in groups if g != labels[i])
        denom = max(a, b)
        out[i] = (b - a) / denom if denom > 0 else 0.0
    return out


def pms(private: np.ndarray, modality_labels: Sequence) -> float:
    """Mean silhouette (Euclidean) of private vectors grouped by modality."""
    return float(silhouette_samples(private, modality_labels).mean())


def _mean_pairwise_cos(v: np.ndarray, absolute: bool) -> float:
    n = np.maximum(np.linalg.norm(v, axis=1), EPS)
    u = v / n[:, None]
    cos = u @ u.T
    iu = np.triu_indices(len(v), k=1)
    vals = cos[iu]
    zero = (np.linalg.norm(v, axis=1) < EPS)
    if zero.any():
        bad = zero[iu[0]] | zero[iu[1]]
        vals = np.where(bad, 0.0, vals)
    vals = np.abs(vals) if absolute else vals
    return float(vals.mean())


def shared_redundancy(shared: np.ndarray) -> float:
    return _mean_pairwise_cos(np.asarray(shared, dtype=float), absolute=True)


def private_homogeneity(private: np.ndarray) -> float:
    return (_mean_pairwise_cos(np.asarray(private, dtype=float), absolute=False) + 1.0) / 2.0


def imbalance_score(row: DumpRow, w_shared: float = 0.5, w_private: float = 0.5) -> float:
    """``w_s * mean|cos|(shared slices) + w_p * (mean cos(private) + 1) / 2``.

    This is a surrogate with documented terms, not a reference formula.
    """
    if len(row.shared) < 2:
        raise ValueError("imbalance score needs at least two modalities")
    return w_shared * shared_redundancy(row.shared) + w_private * private_homogeneity(row.private)


@dataclass
class BinStats:
    bin: int
    count: int
    f1: float
    sid: float
    pms: float
    imbalance_mean: float


BIN_HEADER = ("bin", "count", "f1", "sid", "pms", "imbalance_mean")


def _bin_f1(rows: list[DumpRow], task: str) -> float:
    pred = [r.pred for r in rows]
    truth = [r.label for r in rows]
    if task == "classification":
        return f1([int(p) for p in pred], [int(t) for t in truth], "weighted")
    try:
        return binary_f1_from_scores(pred, truth)
    except ValueError:
        return 0.0


def bin_analysis(
    rows: Sequence[DumpRow],
    n_bins: int = 5,
    score: Callable[[DumpRow], float] = imbalance_score,
    task: str = "regression",
    min_per_bin: int = 5,
) -> list[BinStats]:
    """Equal-count bins by increasing imbalance score, with per-bin F1/SID/PMS."""
    if n_bins < 2:
        raise ValueError("n_bins must be at least 2")
    rows = list(rows)
    if len(rows) < n_bins * min_per_bin:
        raise ValueError(f"need at least {n_bins * min_per_bin} samples for {n_bins} bins, got {len(rows)}")
    scores = np.array([score(r) for r in rows])
    order = np.argsort(scores, kind="stable")
    out = []
    for b, idx in enumerate(np.array_split(order, n_bins)):
        members = [rows[i] for i in idx]
        shared = np.concatenate([r.shared for r in members])
        private = np.concatenate([r.private for r in members])
        mod_labels = np.tile(np.arange(len(members[0].private)), len(members))
        out.append(
            BinStats(
                bin=b,
                count=len(members),
                f1=_bin_f1(members, task),
                sid=sid(shared),
                pms=pms(private, mod_labels),
                imbalance_mean=float(scores[idx].mean()),
            )
        )
    return out


def bin_trends(stats: Sequence[BinStats]) -> dict[str, float]:
    """Spearman correlation of F1, SID and PMS against bin index."""
    idx = np.arange(len(stats))
    out = {}
    for key in ("f1", "sid", "pms"):
        vals = np.array([getattr(s, key) for s in stats])
        if np.all(vals == vals[0]):
            out[key] = 0.0
        else:
            out[key] = float(spearmanr(idx, vals).statistic)
    return out


def overall(rows: Sequence[DumpRow]) -> dict[str, float]:
    shared = np.concatenate([r.shared for r in rows])
    private = np.concatenate([r.private for r in rows])
    labels = np.tile(np.arange(len(rows[0].private)), len(rows))
    return {"overall_sid": sid(shared), "overall_pms": pms(private, labels)}


# ---------------------------------------------------------------------------
# files


def row_from_dict(obj: dict, where: str = "") -> DumpRow:
    try:
        shared = np.asarray(obj["shared"], dtype=float)
        private = np.asarray(obj["private"], dtype=float)
        row = DumpRow(str(obj["id"]), float(obj["label"]), float(obj["pred"]), shared, private)
    except (KeyError, TypeError, ValueError) as exc:
        raise DumpError(f"{where}malformed dump row ({exc})") from None
    if shared.ndim != 2 or private.ndim != 2 or shared.shape[0] != private.shape[0]:
        raise DumpError(f"{where}shared/private must both be M x d arrays")
    return row


def load_dump(path: str | Path) -> list[DumpRow]:
    rows = []
    shape = None
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DumpError(f"line {lineno}: malformed JSON ({exc.msg})") from None
        if not isinstance(obj, dict):
            raise DumpError(f"line {lineno}: expected an object")
        row = row_from_dict(obj, f"line {lineno}: ")
        if shape is None:
            shape = (row.shared.shape, row.private.shape)
        elif (row.shared.shape, row.private.shape) != shape:
            raise DumpError(f"line {lineno}: inconsistent M/d")
        rows.append(row)
    if not rows:
        raise DumpError("empty dump")
    return rows


def write_dump(rows: Iterable[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")


def write_bin_report(stats: Sequence[BinStats], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BIN_HEADER)
        for s in stats:
            w.writerow([s.bin, s.count, repr(s.f1), repr(s.sid), repr(s.pms), repr(s.imbalance_mean)])
