"""Command-line entry point: train, eval, diagnose, ablate, gradcheck.

Exit codes: 0 success, 1 check failure, 2 usage or configuration error,
3 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import diagnostics as diag
from . import gradsuite
from .config import ConfigError, RunConfig, load_config
from .data import Dataset, DatasetError, SyntheticSpec, generate_imbalance_dump, generate_synthetic, load_dataset
from .metrics import CLASSIFICATION_COLUMNS, REGRESSION_COLUMNS, classification_report, mae, regression_report
from .model import DBRModel
from .training import (
    DivergenceError,
    branch_statistics,
    holdout_split,
    load_snapshot,
    predict,
    private_attention_mass,
    save_snapshot,
    train,
    write_history,
)

log = logging.getLogger("dbr")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3

# ablation arms in reporting order: components, fusion mechanisms, regularizers
ABLATION_ARMS: dict[str, dict] = {
    "full": {},
    "no_tsf": {"use_tsf": False},
    "no_agpr": {"use_agpr": False},
    "no_brf": {"use_brf": False},
    "add": {"fusion_kind": "add"},
    "multiply": {"fusion_kind": "multiply"},
    "no_md_loss": {"use_md_loss": False},
    "no_tsf_loss": {"use_tsf_loss": False},
    "no_agpr_loss": {"use_agpr_loss": False},
}
COMPARISON_HEADER = ("arm", "status", "n_seeds", "val_mae_median", "val_corr_median", "pms_median", "private_mass_median", "dataset_hash")


class UsageError(Exception):
    """Bad command-line usage; mapped to exit code 2."""


# ---------------------------------------------------------------------------
# shared helpers


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def build_id() -> str:
    """Content hash of the package sources, so a manifest pins the code it ran."""
    h = hashlib.sha1()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:12]


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(args) -> RunConfig:
    """Defaults, then the config file, then flags; seed falls back to DBR_SEED."""
    raw: dict = {}
    if getattr(args, "config", None):
        raw = load_config(args.config).to_dict()
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        raw[key.strip()] = _parse_value(value)
    for flag in ("lr", "max_epochs", "d", "task", "val_fold"):
        value = getattr(args, flag, None)
        if value is not None:
            raw[flag] = value
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    elif "seed" not in raw and os.environ.get("DBR_SEED"):
        try:
            raw["seed"] = int(os.environ["DBR_SEED"])
        except ValueError:
            raise ConfigError("seed", f"DBR_SEED={os.environ['DBR_SEED']!r} is not an integer") from None
    return RunConfig.from_dict(raw).validate()


def resolve_dataset(args, config: RunConfig) -> tuple[Dataset, dict]:
    """Dataset plus a JSON-able description of where it came from."""
    if getattr(args, "data", None):
        path = Path(args.data)
        if not path.exists():
            raise UsageError(f"dataset file {path} does not exist")
        return load_dataset(path), {"path": str(path)}
    spec_arg = getattr(args, "synthetic", None)
    if spec_arg is None:
        raise UsageError("give a dataset with --data PATH or --synthetic default|SPEC.json")
    if spec_arg == "default":
        spec = SyntheticSpec(seed=config.seed, task=config.task, n_classes=config.n_classes)
    else:
        p = Path(spec_arg)
        if not p.exists():
            raise UsageError(f"synthetic spec {p} does not exist")
        spec = SyntheticSpec.from_dict(json.loads(p.read_text(encoding="utf-8")))
    return generate_synthetic(spec), {"synthetic": spec.to_dict()}


def dataset_from_source(source: dict) -> Dataset:
    if "path" in source:
        return load_dataset(source["path"])
    return generate_synthetic(SyntheticSpec.from_dict(source["synthetic"]))


def write_metrics(report, out: Path, columns) -> None:
    values = report.to_dict()
    (out / "metrics.json").write_text(json.dumps(values, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    with open(out / "metrics.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        w.writerow([repr(values[c]) for c in columns])


def report_for(config: RunConfig, pred, data: Dataset):
    if config.task == "regression":
        return regression_report(pred.scores, data.labels, config.acc2_mode), REGRESSION_COLUMNS
    return classification_report(pred.scores, data.labels, config.f1_average), CLASSIFICATION_COLUMNS


def write_manifest(out: Path, payload: dict, outputs: list[str]) -> None:
    inventory = {}
    for name in outputs:
        p = out / name
        if not p.exists():
            raise FileNotFoundError(f"manifest lists missing output {p}")
        inventory[name] = _sha256(p)
    payload = dict(payload, outputs=inventory, build_id=build_id())
    (out / "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def run_training(config: RunConfig, data: Dataset, source: dict, out: Path) -> dict:
    """Train on the configured fold and write snapshot, history and manifest."""
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    tr, va = holdout_split(data, config)
    result = train(config, tr, va)
    save_snapshot(result.model.state_dict(), out / "params.dbr")
    write_history(result.history, out / "history.csv")
    pred = predict(result.model, va, keep_state=True)
    report, columns = report_for(config, pred, va)
    write_metrics(report, out, columns)
    summary = {
        "best_epoch": result.best_epoch,
        "best_val": result.best_val,
        "epochs_run": len(result.history),
        "stopped_early": result.stopped_early,
        "n_train": len(tr),
        "n_val": len(va),
    }
    if config.task == "regression":
        summary["val_mean_baseline_mae"] = mae(np.full(len(va), float(np.mean(tr.labels))), va.labels)
    B, M, d = pred.state.z_pri.shape
    summary["val_pms"] = diag.pms(pred.state.z_pri.reshape(B * M, d), np.tile(np.arange(M), B))
    stats = branch_statistics(pred.state)
    if config.brf_include_shared_token and pred.state.psi is not None:
        stats["private_attention_mass"] = private_attention_mass(pred.state)
    write_manifest(
        out,
        {
            "config": config.to_dict(),
            "seed": config.seed,
            "dataset_hash": data.hash(),
            "dataset_source": source,
            "started": started,
            "finished": _now(),
            "metrics": report.to_dict(),
            "training": summary,
            "fusion_weights": stats,
        },
        ["params.dbr", "history.csv", "metrics.json", "metrics.csv"],
    )
    return {"report": report, "summary": summary, "stats": stats, "model": result.model}


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    config = resolve_config(args)
    data, source = resolve_dataset(args, config)
    out = Path(args.out)
    info = run_training(config, data, source, out)
    print(json.dumps({"out": str(out), **info["report"].to_dict()}, sort_keys=True))
    return EXIT_OK


def _load_run_config(args) -> tuple[RunConfig, dict | None]:
    manifest = None
    if args.run:
        mpath = Path(args.run) / "manifest.json"
        if not mpath.exists():
            raise UsageError(f"no manifest at {mpath}")
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
        config = RunConfig.from_dict(manifest["config"])
    else:
        config = resolve_config(args)
    return config, manifest


def cmd_eval(args) -> int:
    config, manifest = _load_run_config(args)
    params_path = Path(args.params) if args.params else (Path(args.run) / "params.dbr" if args.run else None)
    if params_path is None or not params_path.exists():
        raise UsageError(f"parameter snapshot {params_path} not found")
    if args.data or args.synthetic:
        data, _ = resolve_dataset(args, config)
    elif manifest is not None:
        data = dataset_from_source(manifest["dataset_source"])
        if args.split == "val":
            data = holdout_split(data, config)[1]
        elif args.split == "train":
            data = holdout_split(data, config)[0]
    else:
        raise UsageError("give --run DIR or a dataset via --data/--synthetic")
    model = DBRModel(config, data.modality_dims)
    try:
        model.load_state_dict(load_snapshot(params_path))
    except (KeyError, ValueError) as exc:
        raise UsageError(f"snapshot does not fit this dataset/config: {exc}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    keep = args.dump_reps or args.dump_attn
    pred = predict(model, data, keep_state=keep)
    with open(out / "predictions.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("id", "pred", "truth"))
        for i, p, t in zip(data.ids, pred.scores, data.labels):
            w.writerow((i, repr(float(p)) if config.task == "regression" else int(p), repr(float(t)) if config.task == "regression" else int(t)))
    report, columns = report_for(config, pred, data)
    write_metrics(report, out, columns)
    if args.dump_reps:
        rows = (
            {
                "id": data.ids[i],
                "label": float(data.labels[i]),
                "pred": float(pred.scores[i]),
                "shared": pred.state.shared[i].tolist(),
                "private": pred.state.z_pri[i].tolist(),
            }
            for i in range(len(data))
        )
        diag.write_dump(rows, out / "reps.jsonl")
    if args.dump_attn:
        attn = branch_statistics(pred.state)
        if pred.state.forward_attention is not None:
            attn["forward_attention_mean"] = pred.state.forward_attention.mean(axis=0).tolist()
        if config.brf_include_shared_token and pred.state.psi is not None:
            attn["private_attention_mass"] = private_attention_mass(pred.state)
        (out / "attention.json").write_text(json.dumps(attn, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(report.to_dict(), sort_keys=True))
    return EXIT_OK


def cmd_diagnose(args) -> int:
    if args.bins < 2:
        raise UsageError("--bins must be at least 2")
    if args.construct:
        rows = [diag.row_from_dict(r) for r in generate_imbalance_dump(seed=args.seed or 0)]
    elif args.dump:
        try:
            rows = diag.load_dump(args.dump)
        except FileNotFoundError:
            raise UsageError(f"dump {args.dump} not found") from None
    else:
        raise UsageError("give --dump FILE or --construct")
    try:
        stats = diag.bin_analysis(rows, n_bins=args.bins, task=args.task)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    diag.write_bin_report(stats, out / "bins.csv")
    trends = diag.bin_trends(stats)
    summary = {
        **diag.overall(rows),
        "spearman_f1_vs_imbalance": trends["f1"],
        "spearman_sid_vs_imbalance": trends["sid"],
        "spearman_pms_vs_imbalance": trends["pms"],
        "n_samples": len(rows),
        "n_bins": args.bins,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _median(values):
    vals = [v for v in values if v is not None and not math.isnan(v)]
    return float(np.median(vals)) if vals else float("nan")


def cmd_ablate(args) -> int:
    base = resolve_config(args)
    arms = args.arms.split(",") if args.arms else list(ABLATION_ARMS)
    unknown = [a for a in arms if a not in ABLATION_ARMS]
    if unknown:
        raise UsageError(f"unknown arms {unknown}; choose from {list(ABLATION_ARMS)}")
    arms = [a for a in ABLATION_ARMS if a in arms]
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [base.seed]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for arm in arms:
        results, status, hashes = [], "ok", set()
        for seed in seeds:
            config = base.replace(seed=seed, **ABLATION_ARMS[arm])
            data, source = resolve_dataset(args, config)
            hashes.add(data.hash())
            try:
                info = run_training(config, data, source, out / arm / f"seed{seed}")
            except DivergenceError as exc:
                log.warning("arm %s seed %d diverged: %s", arm, seed, exc)
                status = "diverged"
                continue
            rep = info["report"]
            results.append(
                (rep.mae, rep.corr, info["summary"]["val_pms"], info["stats"].get("private_attention_mass"))
            )
        rows.append(
            (
                arm,
                status,
                len(results),
                _median(r[0] for r in results),
                _median(r[1] for r in results),
                _median(r[2] for r in results),
                _median(r[3] for r in results),
                ";".join(sorted(hashes)),
            )
        )
    with open(out / "comparison.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMPARISON_HEADER)
        for r in rows:
            w.writerow([r[0], r[1], r[2]] + [repr(x) for x in r[3:7]] + [r[7]])
    for r in rows:
        print(f"{r[0]:14s} {r[1]:9s} mae={r[3]:.4f} pms={r[5]:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    suites = None
    if args.module:
        suites = [s.strip() for m in args.module for s in m.split(",") if s.strip()]
    try:
        results = gradsuite.run_suite(suites, seed=args.seed or 0)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    for suite, (err, name) in gradsuite.summarize(results).items():
        print(f"{suite:12s} max_rel_err={err:.3e} worst={name}")
    failed = [r for r in results if not r.ok]
    for r in failed:
        kind = "primitive" if r.suite == "primitives" else "parameter"
        print(f"FAIL {kind} {r.name} rel_err={r.error:.3e}", file=sys.stderr)
    return EXIT_CHECK if failed else EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--task", choices=("regression", "classification"))
    p.add_argument("--val-fold", dest="val_fold", type=int)


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="dataset JSONL file")
    p.add_argument("--synthetic", help="'default' or a JSON generator spec")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dbr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train on one fold and write a run directory")
    _add_config_flags(p)
    _add_data_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a parameter snapshot on a dataset")
    _add_config_flags(p)
    _add_data_flags(p)
    p.add_argument("--run", help="run directory written by train")
    p.add_argument("--params", help="parameter snapshot (defaults to RUN/params.dbr)")
    p.add_argument("--split", choices=("val", "train", "all"), default="val", help="subset of the run's dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--dump-reps", action="store_true", help="write per-sample shared/private vectors")
    p.add_argument("--dump-attn", action="store_true", help="write fusion and routing weight report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("diagnose", help="bin analysis of a representation dump")
    p.add_argument("--dump")
    p.add_argument("--construct", action="store_true", help="use the synthetic imbalance construction")
    p.add_argument("--seed", type=int)
    p.add_argument("--bins", type=int, default=5)
    p.add_argument("--task", choices=("regression", "classification"), default="regression")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("ablate", help="train every ablation arm with shared seeds")
    _add_config_flags(p)
    _add_data_flags(p)
    p.add_argument("--arms", help=f"comma list from {','.join(ABLATION_ARMS)}")
    p.add_argument("--seeds", help="comma list of seeds")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every primitive and parameter")
    p.add_argument("--module", action="append", help=f"restrict to {','.join(gradsuite.SUITES)}")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error in field '{exc.field}': {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, diag.DumpError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
