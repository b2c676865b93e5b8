"""Optimisation loop with early stopping, prediction and parameter snapshots."""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError
from .config import RunConfig
from .data import Dataset, split_folds
from .model import BranchState, DBRModel
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

LOSS_KEYS = ("total", "task", "md", "tsf", "agpr", "decor", "align", "ali", "sep")
HISTORY_COLUMNS = (
    ["epoch"]
    + [f"train_{k}" for k in LOSS_KEYS]
    + [f"val_{k}" for k in LOSS_KEYS]
    + ["val_mae", "best_val"]
)


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class EarlyStopState:
    patience: int
    best: float = float("inf")
    since_best: int = 0
    best_epoch: int = -1
    snapshot: dict[str, np.ndarray] | None = None

    def update(self, epoch: int, value: float, model: DBRModel) -> bool:
        """Record one epoch; True when training should stop."""
        if value < self.best:
            self.best = value
            self.since_best = 0
            self.best_epoch = epoch
            self.snapshot = model.state_dict()
        else:
            self.since_best += 1
        return self.since_best >= self.patience


@dataclass
class TrainResult:
    model: DBRModel
    history: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = float("inf")
    stopped_early: bool = False


def _batches(n: int, batch_size: int, rng: np.random.Generator | None):
    order = rng.permutation(n) if rng is not None else np.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def evaluate(model: DBRModel, data: Dataset, batch_size: int = 64) -> dict[str, float]:
    """Sample-weighted mean of every loss component, plus MAE for regression."""
    sums = dict.fromkeys(LOSS_KEYS, 0.0)
    abs_err = 0.0
    with ad.no_grad():
        for idx in _batches(len(data), batch_size, None):
            res = model(data.batch(idx), data.labels[idx])
            w = len(idx)
            sums["total"] += res.total.item() * w
            for k in LOSS_KEYS[1:]:
                sums[k] += res.losses[k].item() * w
            if model.config.task == "regression":
                abs_err += float(np.abs(res.output.data - data.labels[idx]).sum())
    n = max(len(data), 1)
    out = {k: v / n for k, v in sums.items()}
    out["mae"] = abs_err / n if model.config.task == "regression" else float("nan")
    return out


def train(
    config: RunConfig,
    train_data: Dataset,
    val_data: Dataset,
    model: DBRModel | None = None,
) -> TrainResult:
    """Adam over shuffled mini-batches; keeps the best-validation parameters."""
    config.validate()
    if len(train_data) == 0 or len(val_data) == 0:
        raise ValueError("train and validation sets must be non-empty")
    if set(train_data.ids) & set(val_data.ids):
        raise ValueError("train and validation sets overlap")
    model = model or DBRModel(config, train_data.modality_dims)
    params = model.parameters()
    opt = AdamState()
    shuffle_rng = np.random.default_rng([config.seed, 1])
    stopper = EarlyStopState(config.patience)
    result = TrainResult(model)
    key = "total" if config.early_stop_on == "total" else "task"
    for epoch in range(config.max_epochs):
        sums = dict.fromkeys(LOSS_KEYS, 0.0)
        for step, idx in enumerate(_batches(len(train_data), config.batch_size, shuffle_rng)):
            try:
                res = model(train_data.batch(idx), train_data.labels[idx])
                grads = ad.backward(res.total)
            except NonFiniteError as exc:
                raise DivergenceError(f"epoch {epoch} batch {step}: {exc}") from exc
            adam_step(
                params,
                [grads.get(p, np.zeros_like(p.data)) for p in params],
                opt,
                lr=config.lr,
                weight_decay=config.weight_decay,
            )
            w = len(idx)
            sums["total"] += res.total.item() * w
            for k in LOSS_KEYS[1:]:
                sums[k] += res.losses[k].item() * w
        try:
            val = evaluate(model, val_data)
        except NonFiniteError as exc:
            raise DivergenceError(f"epoch {epoch} validation: {exc}") from exc
        stop = stopper.update(epoch, val[key], model)
        row = {"epoch": epoch}
        row.update({f"train_{k}": v / len(train_data) for k, v in sums.items()})
        row.update({f"val_{k}": val[k] for k in LOSS_KEYS})
        row["val_mae"] = val["mae"]
        row["best_val"] = stopper.best
        result.history.append(row)
        log.info("epoch %d train %.4f val %.4f", epoch, row["train_total"], val[key])
        if stop:
            result.stopped_early = True
            break
    if stopper.snapshot is not None:
        model.load_state_dict(stopper.snapshot)
    result.best_epoch = stopper.best_epoch
    result.best_val = stopper.best
    return result


def holdout_split(data: Dataset, config: RunConfig) -> tuple[Dataset, Dataset]:
    train_idx, val_idx = split_folds(data, config.n_folds, config.seed)[config.val_fold]
    return data.subset(train_idx), data.subset(val_idx)


def concat_states(states: list[BranchState]) -> BranchState:
    first = states[0]
    merged = {}
    for name in ("shared", "z_pri", "z_hat", "tokens", "fused", "cgi_gates", "routing", "psi", "y", "forward_attention"):
        vals = [getattr(s, name) for s in states]
        merged[name] = None if vals[0] is None else np.concatenate(vals)
    return BranchState(modalities=first.modalities, **merged)


@dataclass
class Predictions:
    scores: np.ndarray  # regression scores, or predicted class ids
    probabilities: np.ndarray | None = None
    state: BranchState | None = None


def predict(model: DBRModel, data: Dataset, batch_size: int = 64, keep_state: bool = False) -> Predictions:
    cfg = model.config
    if len(data) == 0:
        empty = np.zeros(0) if cfg.task == "regression" else np.zeros(0, dtype=int)
        probs = None if cfg.task == "regression" else np.zeros((0, cfg.n_classes))
        return Predictions(empty, probs, None)
    outs, states = [], []
    with ad.no_grad():
        for idx in _batches(len(data), batch_size, None):
            res = model(data.batch(idx))
            outs.append(res.output.data)
            if keep_state:
                states.append(res.state)
    out = np.concatenate(outs)
    state = concat_states(states) if keep_state else None
    if cfg.task == "regression":
        return Predictions(out, None, state)
    probs = softmax_rows(out)
    return Predictions(np.argmax(probs, axis=1), probs, state)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# history CSV and parameter snapshot


def write_history(history: list[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in HISTORY_COLUMNS[1:]])


MAGIC = b"DBR1"
VERSION = 1


def save_snapshot(state: dict[str, np.ndarray], path: str | Path) -> None:
    """Little-endian: magic, u32 version, u32 count, then per parameter
    u32 name length, utf-8 name, u32 rank, u32 extents, f64 payload."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(state)))
        for name, arr in state.items():
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype="<f8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def _read(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ValueError("truncated snapshot")
    return buf


def load_snapshot(path: str | Path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as fh:
        if _read(fh, 4) != MAGIC:
            raise ValueError("not a DBR1 snapshot")
        version, count = struct.unpack("<II", _read(fh, 8))
        if version != VERSION:
            raise ValueError(f"unsupported snapshot version {version}")
        for _ in range(count):
            (n,) = struct.unpack("<I", _read(fh, 4))
            name = _read(fh, n).decode("utf-8")
            (rank,) = struct.unpack("<I", _read(fh, 4))
            shape = struct.unpack(f"<{rank}I", _read(fh, 4 * rank))
            size = int(np.prod(shape)) if rank else 1
            out[name] = np.frombuffer(_read(fh, 8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    return out


# ---------------------------------------------------------------------------
# fusion-weight reporting


def private_attention_mass(state: BranchState) -> float:
    """Mean fusion-gate mass on private-only tokens (separate shared-token mode).

    In that mode the last token carries the shared content and the first M
    tokens carry only private content, so the private mass is ``1 - psi_last``.
    """
    M = len(state.modalities)
    if state.psi is None or state.psi.shape[1] != M + 1:
        raise ValueError("private attention mass needs fusion weights over M private tokens plus one shared token")
    return float(state.psi[:, :M].sum(axis=1).mean())


def branch_statistics(state: BranchState) -> dict:
    """Batch means of the gating and routing weights, keyed for JSON reports."""
    mods = state.modalities
    out: dict = {}
    if state.psi is not None:
        names = list(mods) + (["shared"] if state.psi.shape[1] == len(mods) + 1 else [])
        out["psi_mean"] = dict(zip(names, state.psi.mean(axis=0).tolist()))
    if state.cgi_gates is not None:
        out["cgi_gate_mean"] = state.cgi_gates.mean(axis=0).tolist()
    if state.routing is not None:
        # routing[b, n, m] is the weight of donor n in the update of modality m
        mean = state.routing.mean(axis=0)
        out["routing_mean"] = {m: dict(zip(mods, mean[:, j].tolist())) for j, m in enumerate(mods)}
    return out
