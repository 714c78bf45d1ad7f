"""Experiment orchestration behind the command line.

Output directory layout::

    <output_dir>/data/domain1.mdmt, domain2.mdmt, splits.json
    <output_dir>/runs/<config_hash>/<strategy>-seed<N>/
        config.json  metrics.jsonl  checkpoint.mdmt  report.json
    <output_dir>/comparison.json, comparison.txt
"""
from __future__ import annotations

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import storage
from .config import CONFIG_VERSION, ExperimentConfig, from_dict
from .datagen import SPLITS, DomainDataset, generate_domain, normalize, split_patientwise, compute_stats
from .exceptions import ConfigError, MDMTError
from .trainer import STRATEGY_ORDER, Strategy, evaluate, train

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
RUN_FILES = ("config.json", "metrics.jsonl", "checkpoint.mdmt", "report.json")

STRATEGY_LABELS = {
    Strategy.SUPERVISED_BASELINE: ("Supervised Baseline", "D1"),
    Strategy.SEMI_SUPERVISED: ("Semi-Supervised", "D1 + D2"),
    Strategy.SUPERVISED_MDMT: ("Supervised Multi-domain Multi-Task", "D1 + D2"),
    Strategy.SEMI_SUPERVISED_MDMT: ("Semi-Supervised Multi-domain Multi-Task", "D1 + D2"),
}


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n"


def data_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.output_dir) / "data"


def dataset_path(cfg: ExperimentConfig, domain: int) -> Path:
    return data_dir(cfg) / f"domain{domain}.mdmt"


def run_dir(cfg: ExperimentConfig, strategy, seed: int) -> Path:
    return Path(cfg.output_dir) / "runs" / cfg.config_hash() / f"{Strategy(strategy).value}-seed{seed}"


# -- generate -----------------------------------------------------------------

def build_datasets(cfg: ExperimentConfig) -> tuple[DomainDataset, DomainDataset]:
    """Generate, split and attach training statistics to both domains (volumes stay raw)."""
    out = []
    for spec, split in ((cfg.domain1, cfg.split1), (cfg.domain2, cfg.split2)):
        ds = split_patientwise(generate_domain(spec), split.fractions, split.seed, split.stratify)
        ds.stats = compute_stats(ds, "train")
        out.append(ds)
    return out[0], out[1]


def cmd_generate(cfg: ExperimentConfig) -> list[Path]:
    """Write both domain datasets and a split manifest under ``<output_dir>/data``."""
    d1, d2 = build_datasets(cfg)
    folder = data_dir(cfg)
    folder.mkdir(parents=True, exist_ok=True)
    extra = {"data_hash": cfg.data_hash()}
    paths = []
    manifest = {"format_version": FORMAT_VERSION, "data_hash": cfg.data_hash(), "domains": {}}
    for ds in (d1, d2):
        path = dataset_path(cfg, ds.domain_id)
        storage.write_dataset(ds, path, extra=extra)
        paths.append(path)
        manifest["domains"][f"domain{ds.domain_id}"] = {
            "n_patients": len(ds),
            "stats": list(ds.stats),
            "splits": {s: sorted(ds.split_patients(s)) for s in SPLITS},
        }
    manifest_path = folder / "splits.json"
    manifest_path.write_text(_dump_json(manifest))
    paths.append(manifest_path)
    return paths


def load_datasets(cfg: ExperimentConfig) -> tuple[DomainDataset, DomainDataset]:
    """Read the generated datasets, checking they belong to this config."""
    out = []
    for domain in (1, 2):
        path = dataset_path(cfg, domain)
        if not path.exists():
            raise ConfigError(f"dataset {path} does not exist; run `mdmt generate` first")
        ds, extra = storage.read_dataset_bytes(path.read_bytes())
        if extra.get("data_hash") != cfg.data_hash():
            raise ConfigError(f"dataset {path} was generated from a different config; rerun generate")
        if ds.shape != cfg.arch.input_shape:
            raise ConfigError(f"dataset {path} volumes {ds.shape} do not match arch {cfg.arch.input_shape}")
        out.append(ds)
    return out[0], out[1]


# -- train --------------------------------------------------------------------

def _provenance(cfg: ExperimentConfig, strategy: Strategy, seed: int) -> dict:
    return {"format_version": FORMAT_VERSION, "config_hash": cfg.config_hash(),
            "strategy": strategy.value, "seed": seed}


def cmd_train(cfg: ExperimentConfig, strategy, seed: int) -> Path:
    """Train one strategy/seed and write its run directory."""
    strategy = Strategy(strategy)
    tcfg = cfg.train_config(strategy, seed)
    d1, d2 = load_datasets(cfg)
    d1, d2 = normalize(d1), normalize(d2)
    folder = run_dir(cfg, strategy, seed)
    folder.mkdir(parents=True, exist_ok=True)
    for name in RUN_FILES:
        (folder / name).unlink(missing_ok=True)
    prov = _provenance(cfg, strategy, seed)
    (folder / "config.json").write_text(_dump_json({**prov, "experiment": cfg.to_dict()}))

    with open(folder / "metrics.jsonl", "w") as metrics:
        def on_epoch(record, _params):
            metrics.write(json.dumps({**prov, **record}, sort_keys=True, allow_nan=False) + "\n")
            metrics.flush()

        run = train(tcfg, d1, d2, on_epoch=on_epoch)

    storage.save_checkpoint(run.best_params, folder / "checkpoint.mdmt", meta={
        **prov, "epoch": run.best_epoch, "val_auc": run.best_val_auc})
    test = evaluate(run.best_params, d1, d2 if strategy.multitask else None, "test", tcfg.zeta)
    report = {
        **prov,
        "status": "ok",
        "epochs": tcfg.epochs,
        "best_epoch": run.best_epoch,
        "val_auc": run.best_val_auc,
        "test_auc": test["auc"],
        "test_dice": test.get("dice"),
        "wall_clock": round(run.wall_clock, 3),
    }
    (folder / "report.json").write_text(_dump_json(report))
    return folder


# -- evaluate -------------------------------------------------------------------

def cmd_evaluate(checkpoint, datasets, split: str, zeta: float = 0.8) -> dict:
    """Score a checkpoint on ``split`` of each dataset file.

    AUC for datasets with scan labels, Dice for datasets with ROI masks.
    """
    params, meta = storage.load_checkpoint(checkpoint)
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    results = {}
    for path in datasets:
        ds = storage.read_dataset(path)
        if ds.shape != params.arch.input_shape:
            raise ConfigError(f"checkpoint arch {params.arch.input_shape} does not match dataset {ds.shape}")
        ds = normalize(ds)
        if ds.labels is not None:
            res = evaluate(params, d1=ds, split=split)
        else:
            res = evaluate(params, d2=ds, split=split, zeta=zeta)
        results[f"domain{ds.domain_id}"] = res
    return {"format_version": FORMAT_VERSION, "checkpoint": str(checkpoint), "split": split,
            "config_hash": meta.get("config_hash"), "results": results}


# -- compare ----------------------------------------------------------------------

def _run_worker(args) -> dict:
    cfg_dict, strategy, seed = args
    cfg = from_dict(cfg_dict)
    try:
        cmd_train(cfg, strategy, seed)
        return json.loads((run_dir(cfg, strategy, seed) / "report.json").read_text())
    except MDMTError as exc:
        return {**_provenance(cfg, Strategy(strategy), seed), "status": "failed",
                "error": f"{type(exc).__name__}: {exc}"}


def _cached(cfg: ExperimentConfig, strategy, seed) -> dict | None:
    path = run_dir(cfg, strategy, seed) / "report.json"
    if not path.exists():
        return None
    report = json.loads(path.read_text())
    if report.get("config_hash") != cfg.config_hash():
        raise ConfigError(f"{path} has config hash {report.get('config_hash')}, "
                          f"expected {cfg.config_hash()}; refusing to mix runs")
    return report if report.get("status") == "ok" else None


def summarize(rows: list[dict], strategies) -> dict:
    summary = {}
    for s in strategies:
        s = Strategy(s)
        ok = [r for r in rows if r["strategy"] == s.value and r.get("status") == "ok"]
        entry = {"n_runs": sum(r["strategy"] == s.value for r in rows), "n_ok": len(ok)}
        if ok:
            test = [r["test_auc"] for r in ok]
            entry.update(mean_test_auc=float(np.mean(test)), min_test_auc=float(np.min(test)),
                         max_test_auc=float(np.max(test)),
                         mean_val_auc=float(np.mean([r["val_auc"] for r in ok])))
            dice = [r["test_dice"] for r in ok if r.get("test_dice") is not None]
            entry["mean_test_dice"] = float(np.mean(dice)) if dice else None
        summary[s.value] = entry
    return summary


def format_table(report: dict) -> str:
    header = f"{'Training method for the classifier':<42}{'Data sets':<11}{'AUC':>7}{'min':>7}{'max':>7}{'val AUC':>9}{'Dice':>7}"
    lines = [header, "-" * len(header)]
    for s in report["strategies"]:
        label, data = STRATEGY_LABELS[Strategy(s)]
        e = report["summary"][s]
        if not e["n_ok"]:
            lines.append(f"{label:<42}{data:<11}{'failed':>7}")
            continue

        def f(v):
            return f"{v:7.3f}" if v is not None else f"{'-':>7}"

        lines.append(f"{label:<42}{data:<11}{f(e['mean_test_auc'])}{f(e['min_test_auc'])}"
                     f"{f(e['max_test_auc'])}  {f(e['mean_val_auc'])}{f(e['mean_test_dice'])}")
    n_seeds = len(report["seeds"])
    lines.append(f"test AUC mean/min/max over {n_seeds} seed(s); config {report['config_hash']}")
    return "\n".join(lines) + "\n"


def cmd_compare(cfg: ExperimentConfig, jobs: int | None = None) -> dict:
    """Run (or reuse) every strategy x seed and write the comparison report."""
    if not dataset_path(cfg, 1).exists() or not dataset_path(cfg, 2).exists():
        cmd_generate(cfg)
    strategies = [s for s in STRATEGY_ORDER if s in set(map(Strategy, cfg.strategies))]
    todo, reports = [], {}
    for s in strategies:
        for seed in cfg.seeds:
            cached = _cached(cfg, s, seed)
            if cached is not None:
                reports[(s.value, seed)] = cached
            else:
                todo.append((cfg.to_dict(), s.value, seed))
    start = time.perf_counter()
    jobs = jobs or cfg.jobs
    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_worker, todo))
    else:
        results = [_run_worker(t) for t in todo]
    for r in results:
        reports[(r["strategy"], r["seed"])] = r
    rows, timing = [], {}
    for s in strategies:
        for seed in cfg.seeds:
            row = dict(reports[(s.value, seed)])
            # per-run timing is kept apart so that rows are reproducible
            timing[f"{s.value}-seed{seed}"] = row.pop("wall_clock", None)
            rows.append(row)
    report = {
        "format_version": FORMAT_VERSION,
        "config_version": CONFIG_VERSION,
        "config_hash": cfg.config_hash(),
        "strategies": [s.value for s in strategies],
        "seeds": list(cfg.seeds),
        "rows": rows,
        "summary": summarize(rows, strategies),
        "run_wall_clock": timing,
        "wall_clock": round(time.perf_counter() - start, 3),
    }
    out = Path(cfg.output_dir)
    (out / "comparison.json").write_text(_dump_json(report))
    (out / "comparison.txt").write_text(format_table(report))
    return report
