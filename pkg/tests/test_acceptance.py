"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The verdict lines appear in the "acceptance criteria" section of the pytest
terminal summary.  Criteria 8, 9 and 10 share one cached training grid
(default synthetic regression task, seeds 0, 1, 2).
"""

import math
import time
import warnings

import numpy as np
import pytest
from scipy.stats import ortho_group

import oracles
from dbr import diagnostics as dg
from dbr import metrics
from dbr.agpr import agpr_sep_loss, route_private
from dbr.autodiff import Tensor
from dbr.brf import context_gate_from_logits
from dbr.cli import main
from dbr.config import RunConfig
from dbr.data import SyntheticSpec, generate_imbalance_dump, generate_synthetic
from dbr.encoders import SharedPrivatePair, md_loss
from dbr.gradsuite import run_suite
from dbr.model import DBRModel
from dbr.training import holdout_split, predict, private_attention_mass, train
from dbr.tsf import tsf_align_loss

SEEDS = (0, 1, 2)
TABLE_ARMS = {
    "full": {},
    "no_tsf": {"use_tsf": False},
    "no_agpr": {"use_agpr": False},
    "no_brf": {"use_brf": False},
    "add": {"fusion_kind": "add"},
    "multiply": {"fusion_kind": "multiply"},
}
TOKEN_ARMS = {
    "separate_token": {"brf_include_shared_token": True},
    "separate_token_no_agpr_loss": {"brf_include_shared_token": True, "use_agpr_loss": False},
}


# ---------------------------------------------------------------------------
# 1


def test_criterion_01_gradient_correctness(criterion):
    start = time.perf_counter()
    results = run_suite(seed=0)
    elapsed = time.perf_counter() - start
    worst = max(results, key=lambda r: r.error)
    params = [r for r in results if r.suite != "primitives"]
    ok = all(r.ok for r in results) and elapsed < 60 and len(params) > 0
    criterion(1, ok, f"{len(params)} parameters + primitives, max rel err {worst.error:.2e} ({worst.name}), {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------------------
# 2


def test_criterion_02_loss_identities(criterion):
    sha = np.array([[1.0, 0.0], [0.0, 0.0], [-1.0, 0.0]])[None]
    pri = np.array([[2.0, 0.0], [0.0, 0.0], [-2.0, 0.0]])[None]
    md = md_loss({"A": SharedPrivatePair(Tensor(sha), Tensor(pri))}).item()

    anchors = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])  # pairwise distance^2 >= 1 >= delta
    sep = agpr_sep_loss(Tensor(anchors[None]), Tensor(anchors), delta=0.2).item()

    rng = np.random.default_rng(0)
    align = tsf_align_loss({"L": Tensor(rng.normal(size=(2, 3, 4)))}, {"L": Tensor(rng.normal(size=(2, 3, 4)))}).item()

    ok = abs(md) <= 1e-9 and abs(sep) <= 1e-9 and abs(align) <= 1e-9
    criterion(2, ok, f"md={md:.1e} sep={sep:.1e} align(M=1)={align:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 3


def test_criterion_03_simplex_invariants(criterion):
    dims = {"L": 5, "A": 4, "V": 3}
    worst = 0.0
    negative = False
    passes = 0
    for model_seed in range(20):
        for flags in ({}, {"brf_include_shared_token": True}):
            model = DBRModel(RunConfig(d=4, k=3, n_heads=2, seed=model_seed, **flags), dims)
            rng = np.random.default_rng(1000 + model_seed)
            for _ in range(25):
                batch = {m: rng.normal(0, rng.uniform(0.1, 5), size=(2, int(rng.integers(2, 6)), k)) for m, k in dims.items()}
                s = model(batch).state
                for arr, axis in ((s.cgi_gates, -1), (s.routing, 1), (s.forward_attention, -1), (s.psi, -1)):
                    negative |= bool(np.any(arr < 0))
                    worst = max(worst, float(np.abs(arr.sum(axis=axis) - 1.0).max()))
                passes += 1
    ok = passes >= 1000 and worst <= 1e-6 and not negative
    criterion(3, ok, f"{passes} forward passes, max |sum - 1| = {worst:.1e}, negative entries: {negative}")
    assert ok


# ---------------------------------------------------------------------------
# 4


def test_criterion_04_scale_shift_invariances(criterion):
    rng = np.random.default_rng(4)
    route_err = psi_err = sid_err = 0.0
    for _ in range(200):
        z = rng.normal(size=(3, 3, 5))
        anchors = Tensor(rng.normal(size=(3, 5)))
        gamma = rng.uniform(0.5, 5)
        scaled = z.copy()
        scaled[:, rng.integers(3)] *= rng.uniform(0.01, 100)
        base = route_private(Tensor(z), anchors, gamma=gamma).routing.data
        moved = route_private(Tensor(scaled), anchors, gamma=gamma).routing.data
        route_err = max(route_err, float(np.abs(moved - base).max()))

        logits = rng.normal(size=(2, 4))
        c = rng.uniform(-20, 20)
        psi_err = max(
            psi_err,
            float(np.abs(context_gate_from_logits(Tensor(logits + c)).data - context_gate_from_logits(Tensor(logits)).data).max()),
        )

        x = rng.normal(size=(20, 6))
        rot = ortho_group.rvs(6, random_state=int(rng.integers(1 << 30)))
        s0 = dg.sid(x)
        sid_err = max(sid_err, abs(dg.sid(x @ rot) - s0), abs(dg.sid(rng.uniform(0.01, 100) * x) - s0))
    ok = route_err <= 1e-9 and psi_err <= 1e-12 and sid_err <= 1e-9
    criterion(4, ok, f"routing {route_err:.1e}, psi {psi_err:.1e}, sid {sid_err:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 5


def test_criterion_05_metric_oracles(criterion):
    rng = np.random.default_rng(5)
    mismatches = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for _ in range(1000):
            n = int(rng.integers(2, 50))
            truth = np.round(rng.uniform(-3, 3, n), int(rng.integers(0, 3)))
            pred = np.round(truth + rng.normal(0, 1.5, n), int(rng.integers(0, 4)))
            truth[0] = -1.0 if rng.uniform() < 0.5 else 1.0
            p, t = pred.tolist(), truth.tolist()
            pairs = (
                (metrics.mae(p, t), oracles.mae(p, t)),
                (metrics.pearson_corr(p, t), oracles.corr(p, t)),
                (metrics.acc2(p, t), oracles.acc2(p, t)),
                (metrics.acc7(p, t), oracles.acc7(p, t)),
                (metrics.binary_f1_from_scores(p, t), oracles.f1_from_scores(p, t)),
            )
            mismatches += sum(a != b for a, b in pairs)
    ok = mismatches == 0
    criterion(5, ok, f"1000 instances x 5 metrics, {mismatches} bit mismatches")
    assert ok


# ---------------------------------------------------------------------------
# 6


def test_criterion_06_diagnostic_hand_values(criterion):
    a, b = 3 / math.sqrt(2), 1 / math.sqrt(2)
    sigma_31 = np.array([[a, 0.0], [-a, 0.0], [0.0, b], [0.0, -b]])  # centred singular values (3, 1)
    sid_val = dg.sid(sigma_31)
    pms_val = dg.pms(np.array([[0.0], [1.0], [10.0], [11.0]]), [0, 0, 1, 1])
    sid_ok = abs(sid_val - 0.8774) <= 1e-3
    pms_ok = abs(pms_val - 0.9041) <= 1e-3
    ok = sid_ok and pms_ok
    criterion(6, ok, f"SID {sid_val:.4f} (target 0.8774), PMS {pms_val:.4f} (target 0.9041)")
    assert sid_ok, sid_val
    assert pms_ok, pms_val


# ---------------------------------------------------------------------------
# 7


def test_criterion_07_imbalance_bins(criterion):
    start = time.perf_counter()
    trends = {}
    for seed in SEEDS:
        rows = [dg.row_from_dict(r) for r in generate_imbalance_dump(seed=seed)]
        trends[seed] = dg.bin_trends(dg.bin_analysis(rows, n_bins=5))
    elapsed = time.perf_counter() - start
    ok = all(v <= -0.8 for t in trends.values() for v in t.values()) and elapsed < 600
    detail = "; ".join(f"seed {s}: " + " ".join(f"{k}={v:.2f}" for k, v in t.items()) for s, t in trends.items())
    criterion(7, ok, f"{detail} ({elapsed:.0f}s)")
    assert ok


# ---------------------------------------------------------------------------
# shared training grid for 8, 9 and 10


def _run_arm(seed: int, flags: dict) -> dict:
    data = generate_synthetic(SyntheticSpec(seed=seed))
    config = RunConfig(seed=seed, **flags)
    tr, va = holdout_split(data, config)
    start = time.perf_counter()
    result = train(config, tr, va)
    elapsed = time.perf_counter() - start
    preds = predict(result.model, va, keep_state=True)
    st = preds.state
    B, M, d = st.z_pri.shape
    out = {
        "mae": metrics.mae(preds.scores, va.labels),
        "baseline": metrics.mae(np.full(len(va), tr.labels.mean()), va.labels),
        "pms": dg.pms(st.z_pri.reshape(B * M, d), np.tile(np.arange(M), B)),
        "epochs": len(result.history),
        "seconds": elapsed,
    }
    if st.psi is not None and st.psi.shape[1] == M + 1:
        out["private_mass"] = private_attention_mass(st)
    return out


@pytest.fixture(scope="module")
def table_grid():
    start = time.perf_counter()
    runs = {arm: [_run_arm(s, flags) for s in SEEDS] for arm, flags in TABLE_ARMS.items()}
    return runs, time.perf_counter() - start


@pytest.fixture(scope="module")
def token_grid():
    return {arm: [_run_arm(s, flags) for s in SEEDS] for arm, flags in TOKEN_ARMS.items()}


def test_criterion_08_ablation_ordering(criterion, table_grid):
    runs, elapsed = table_grid
    med = {arm: float(np.median([r["mae"] for r in rs])) for arm, rs in runs.items()}
    pms_med = {arm: float(np.median([r["pms"] for r in rs])) for arm in ("full", "no_agpr") for rs in [runs[arm]]}
    losers = [arm for arm in TABLE_ARMS if arm != "full" and not med["full"] < med[arm]]
    pms_ok = pms_med["no_agpr"] < pms_med["full"]
    ok = not losers and pms_ok and elapsed < 1200
    detail = " ".join(f"{a}={m:.4f}" for a, m in med.items())
    detail += f"; pms full={pms_med['full']:.3f} no_agpr={pms_med['no_agpr']:.3f}; {elapsed:.0f}s"
    if losers:
        detail += f"; full not better than {losers}"
    criterion(8, ok, "median val MAE " + detail)
    assert pms_ok
    assert elapsed < 1200
    assert not losers, med


def test_criterion_09_private_attention_drops_without_routing_loss(criterion, token_grid):
    with_loss = [r["private_mass"] for r in token_grid["separate_token"]]
    without = [r["private_mass"] for r in token_grid["separate_token_no_agpr_loss"]]
    mean_with, mean_without = float(np.mean(with_loss)), float(np.mean(without))
    ok = mean_without < mean_with
    per_seed = ", ".join(f"{a:.3f}/{b:.3f}" for a, b in zip(with_loss, without))
    criterion(9, ok, f"private mass with/without loss, mean over seeds {mean_with:.4f}/{mean_without:.4f} (per seed {per_seed})")
    assert ok


def test_criterion_10_training_sanity(criterion, table_grid):
    runs, _ = table_grid
    full = runs["full"]
    gains = [1 - r["mae"] / r["baseline"] for r in full]
    ok = all(g >= 0.25 for g in gains) and all(r["epochs"] <= 100 and r["seconds"] < 300 for r in full)
    detail = ", ".join(
        f"seed {s}: {r['mae']:.3f} vs {r['baseline']:.3f} ({g:.0%}, {r['epochs']} ep, {r['seconds']:.0f}s)"
        for s, r, g in zip(SEEDS, full, gains)
    )
    criterion(10, ok, detail)
    assert ok


# ---------------------------------------------------------------------------
# 11


def test_criterion_11_reproducibility(criterion, tmp_path):
    args = ["--synthetic", "default", "--seed", "7", "--max-epochs", "3"]
    assert main(["train", *args, "--out", str(tmp_path / "a")]) == 0
    assert main(["train", *args, "--out", str(tmp_path / "b")]) == 0
    same = all(
        (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        for name in ("history.csv", "params.dbr")
    )
    criterion(11, same, "history.csv and params.dbr byte-identical across two runs")
    assert same
