"""Synthetic multimodal data, JSONL dataset files and fold splitting."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

MODALITY_ORDER = ("L", "A", "V")


def ordered_modalities(names) -> list[str]:
    """Canonical order: language, acoustic, visual, then any others sorted."""
    known = [m for m in MODALITY_ORDER if m in names]
    return known + sorted(m for m in names if m not in MODALITY_ORDER)


SCHEMA = "dbr-ds-v1"
LABEL_RANGE = (-3.0, 3.0)


class DatasetError(ValueError):
    """Malformed or inconsistent dataset file."""


@dataclass
class Dataset:
    ids: list[str]
    mods: dict[str, np.ndarray]  # modality -> (n, T_m, d_in)
    labels: np.ndarray
    task: str = "regression"
    n_classes: int | None = None
    gen_spec: dict | None = None

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def dims(self) -> dict[str, tuple[int, int]]:
        return {m: (int(a.shape[1]), int(a.shape[2])) for m, a in self.mods.items()}

    @property
    def modality_dims(self) -> dict[str, int]:
        return {m: int(a.shape[2]) for m, a in self.mods.items()}

    def batch(self, idx) -> dict[str, np.ndarray]:
        idx = np.asarray(idx, dtype=int)
        return {m: a[idx] for m, a in self.mods.items()}

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=int)
        return Dataset(
            [self.ids[i] for i in idx],
            self.batch(idx),
            self.labels[idx],
            self.task,
            self.n_classes,
            self.gen_spec,
        )

    def hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.task.encode())
        h.update("\0".join(self.ids).encode())
        h.update(np.ascontiguousarray(self.labels, dtype=np.float64).tobytes())
        for m in sorted(self.mods):
            h.update(m.encode())
            h.update(np.ascontiguousarray(self.mods[m], dtype=np.float64).tobytes())
        return h.hexdigest()


@dataclass
class SyntheticSpec:
    n_samples: int = 500
    dims: dict[str, tuple[int, int]] = field(
        default_factory=lambda: {"L": (8, 12), "A": (8, 10), "V": (8, 10)}
    )
    k_s: int = 4
    k_p: int = 2
    rho: float = 0.3
    dominant: str = "L"
    noise: float = 0.1
    task: str = "regression"
    n_classes: int = 2
    shared_weight_scale: float = 1.0
    private_weight_scale: float = 1.0
    seed: int = 0

    def validate(self) -> None:
        if self.k_s < 1 or self.k_p < 1:
            raise ValueError("k_s and k_p must be at least 1")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        if self.dominant not in self.dims:
            raise ValueError(f"dominant modality {self.dominant!r} not among {list(self.dims)}")
        if self.n_samples < 1:
            raise ValueError("n_samples must be positive")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["dims"] = {m: list(v) for m, v in self.dims.items()}
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "SyntheticSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise DatasetError(f"unknown synthetic spec keys {unknown}")
        kwargs = dict(raw)
        if "dims" in kwargs:
            kwargs["dims"] = {m: (int(v[0]), int(v[1])) for m, v in kwargs["dims"].items()}
        spec = cls(**kwargs)
        try:
            spec.validate()
        except ValueError as exc:
            raise DatasetError(str(exc)) from None
        return spec


def _label_weights(rng: np.random.Generator, spec: SyntheticSpec) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    n_terms = spec.k_s + len(spec.dims) * spec.k_p
    scale = 1.5 / np.sqrt(n_terms)
    w_u = rng.normal(0.0, scale, spec.k_s) * spec.shared_weight_scale
    w_v = {m: rng.normal(0.0, scale, spec.k_p) * spec.private_weight_scale for m in ordered_modalities(spec.dims)}
    return w_u, w_v


def generate_synthetic(spec: SyntheticSpec | None = None) -> Dataset:
    """Shared latents ``u`` and private latents ``v_m`` lifted into each modality.

    Each modality sees ``P_m [s_m u ; v_m]`` at every time step plus Gaussian
    noise, where ``s_m = 1 + rho`` for the dominant modality and ``1 - rho``
    otherwise.  Regression labels are ``w_u.u + sum_m w_m.v_m`` clipped to
    [-3, 3]; classification labels bin that score (sign for two classes).
    """
    spec = spec or SyntheticSpec()
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    # draw in canonical order so a reordered dims mapping yields the same data
    mods = ordered_modalities(spec.dims)
    w_u, w_v = _label_weights(rng, spec)
    lifts = {
        m: rng.normal(0.0, 1.0 / np.sqrt(spec.k_s + spec.k_p), (spec.dims[m][1], spec.k_s + spec.k_p))
        for m in mods
    }
    n = spec.n_samples
    u = rng.normal(size=(n, spec.k_s))
    v = {m: rng.normal(size=(n, spec.k_p)) for m in mods}
    out = {}
    for m in mods:
        T, d_in = spec.dims[m]
        s = 1.0 + spec.rho if m == spec.dominant else 1.0 - spec.rho
        latent = np.concatenate([s * u, v[m]], axis=1)
        clean = latent @ lifts[m].T
        out[m] = np.repeat(clean[:, None, :], T, axis=1) + spec.noise * rng.normal(size=(n, T, d_in))
    score = u @ w_u + sum(v[m] @ w_v[m] for m in mods)
    score = np.clip(score, *LABEL_RANGE)
    if spec.task == "regression":
        labels = score
        n_classes = None
    else:
        n_classes = spec.n_classes
        if n_classes == 2:
            labels = (score > 0).astype(int)
        else:
            edges = np.linspace(*LABEL_RANGE, n_classes + 1)[1:-1]
            labels = np.digitize(score, edges)
    gen = spec.to_dict()
    gen["weights"] = {"shared": w_u.tolist(), "private": {m: w.tolist() for m, w in w_v.items()}}
    gen["lifts"] = {m: a.tolist() for m, a in lifts.items()}
    ids = [f"s{i:05d}" for i in range(n)]
    return Dataset(ids, out, np.asarray(labels), spec.task, n_classes, gen)


# ---------------------------------------------------------------------------
# JSONL interchange


def save_dataset(ds: Dataset, path: str | Path) -> None:
    header: dict[str, Any] = {
        "schema": SCHEMA,
        "task": ds.task,
        "dims": {m: list(v) for m, v in ds.dims.items()},
    }
    if ds.n_classes is not None:
        header["n_classes"] = ds.n_classes
    if ds.gen_spec is not None:
        header["gen_spec"] = ds.gen_spec
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header) + "\n")
        for i, sid in enumerate(ds.ids):
            label = ds.labels[i]
            label = int(label) if ds.task == "classification" else float(label)
            row = {"id": sid, "label": label, "mods": {m: a[i].tolist() for m, a in ds.mods.items()}}
            fh.write(json.dumps(row) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    """Read and validate a JSONL dataset; errors cite the 1-based line number."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DatasetError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetError(f"line 1: malformed JSON header ({exc.msg})") from None
    if not isinstance(header, dict) or header.get("schema") != SCHEMA:
        raise DatasetError(f"line 1: expected header with schema {SCHEMA!r}")
    task = header.get("task", "regression")
    if task not in ("regression", "classification"):
        raise DatasetError(f"line 1: unknown task {task!r}")
    dims = {m: tuple(int(x) for x in v) for m, v in header.get("dims", {}).items()}
    if len(dims) < 2:
        raise DatasetError("line 1: header must declare at least two modalities in 'dims'")
    ids: list[str] = []
    labels: list = []
    feats: dict[str, list[np.ndarray]] = {m: [] for m in dims}
    seen: set[str] = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"line {lineno}: malformed JSON ({exc.msg})") from None
        if not isinstance(row, dict):
            raise DatasetError(f"line {lineno}: expected an object")
        sid = row.get("id")
        if not isinstance(sid, str):
            raise DatasetError(f"line {lineno}: missing string 'id'")
        if sid in seen:
            raise DatasetError(f"line {lineno}: duplicate id {sid!r}")
        seen.add(sid)
        label = row.get("label")
        if isinstance(label, bool) or not isinstance(label, (int, float)):
            raise DatasetError(f"line {lineno}: missing numeric 'label'")
        if task == "classification" and not float(label).is_integer():
            raise DatasetError(f"line {lineno}: classification label must be an integer")
        mods = row.get("mods")
        if not isinstance(mods, dict):
            raise DatasetError(f"line {lineno}: missing 'mods' object")
        for m, (T, d_in) in dims.items():
            if m not in mods:
                raise DatasetError(f"line {lineno}: missing modality {m!r}")
            try:
                arr = np.asarray(mods[m], dtype=np.float64)
            except (TypeError, ValueError):
                raise DatasetError(f"line {lineno}: modality {m!r} is not a numeric [T][d_in] array") from None
            if arr.shape != (T, d_in):
                raise DatasetError(
                    f"line {lineno}: modality {m!r} has shape {arr.shape}, header declares {(T, d_in)}"
                )
            if not np.all(np.isfinite(arr)):
                raise DatasetError(f"line {lineno}: modality {m!r} contains non-finite values")
            feats[m].append(arr)
        ids.append(sid)
        labels.append(label)
    if not ids:
        mods_arr = {m: np.zeros((0, T, d)) for m, (T, d) in dims.items()}
    else:
        mods_arr = {m: np.stack(v) for m, v in feats.items()}
    dtype = int if task == "classification" else float
    n_classes = header.get("n_classes")
    return Dataset(ids, mods_arr, np.asarray(labels, dtype=dtype), task, n_classes, header.get("gen_spec"))


# ---------------------------------------------------------------------------
# folds


def strata(labels: np.ndarray, task: str) -> np.ndarray:
    labels = np.asarray(labels)
    if task == "regression":
        return np.sign(labels).astype(int)
    return labels.astype(int)


def split_folds(dataset_or_labels, k: int = 5, seed: int = 0, task: str | None = None) -> list[tuple[np.ndarray, np.ndarray]]:
    """Deterministic stratified k-fold partition as ``(train_idx, val_idx)`` pairs.

    Regression labels are stratified by sign (negative/zero/positive).
    Indices of each stratum are shuffled and dealt round-robin, with the dealer
    position carried across strata so fold sizes differ by at most one.
    """
    if isinstance(dataset_or_labels, Dataset):
        labels, task = dataset_or_labels.labels, dataset_or_labels.task
    else:
        labels, task = np.asarray(dataset_or_labels), task or "regression"
    n = len(labels)
    if k < 2:
        raise ValueError("k must be at least 2")
    if n < k:
        raise ValueError(f"cannot split {n} samples into {k} folds")
    rng = np.random.default_rng(seed)
    groups = strata(labels, task)
    folds: list[list[int]] = [[] for _ in range(k)]
    pos = 0
    for g in np.unique(groups):
        members = np.flatnonzero(groups == g)
        for idx in rng.permutation(members):
            folds[pos % k].append(int(idx))
            pos += 1
    out = []
    everything = np.arange(n)
    for f in folds:
        val = np.sort(np.asarray(f, dtype=int))
        train = np.setdiff1d(everything, val)
        out.append((train, val))
    return out


# ---------------------------------------------------------------------------
# representation-level imbalance construction


def generate_imbalance_dump(
    n: int = 500,
    d: int = 8,
    modalities=("L", "A", "V"),
    seed: int = 0,
    max_flip: float = 0.45,
    rep_noise: float = 0.05,
) -> list[dict]:
    """Representation dump whose branch imbalance grows along a hidden axis.

    Each sample draws a level ``t`` in [0, 1].  Its shared slices interpolate
    from independent random directions towards random multiples of one
    dominant direction, its
    private vectors interpolate from well separated modality centres towards a
    common centre, and its prediction has its sign flipped with probability
    ``max_flip * t``.  Rows follow the dump JSONL schema plus a ``level`` key.
    """
    rng = np.random.default_rng(seed)
    M = len(modalities)
    dominant = rng.normal(size=d)
    dominant /= np.linalg.norm(dominant)
    centres = 3.0 * np.eye(d)[:M]
    common = centres.mean(axis=0) + 1.5 * dominant
    rows = []
    for i in range(n):
        t = rng.uniform()
        diverse = rng.normal(size=(M, d))
        diverse /= np.linalg.norm(diverse, axis=1, keepdims=True)
        amp = rng.normal(size=(M, 1))
        shared = (1.0 - t) * diverse + t * amp * dominant + rep_noise * rng.normal(size=(M, d))
        private = (1.0 - t) * centres + t * common + 0.3 * rng.normal(size=(M, d))
        label = float(rng.choice([-1.0, 1.0]) * rng.uniform(0.5, 3.0))
        pred = label + 0.3 * rng.normal()
        if np.sign(pred) != np.sign(label):
            pred = -pred
        if rng.uniform() < max_flip * t:
            pred = -pred
        rows.append(
            {
                "id": f"s{i:05d}",
                "label": label,
                "pred": float(pred),
                "shared": shared.tolist(),
                "private": private.tolist(),
                "level": float(t),
            }
        )
    return rows
