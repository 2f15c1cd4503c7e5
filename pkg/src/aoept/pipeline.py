"""Pipeline stages over a run directory.

Layout::

    run/
      config.ini                  resolved RunConfig
      data/                       {train,val,test}.jsonl + meta.json
      tables/                     train.json, val.json, test_{0,1,2}.json
      backbone/                   frozen checkpoint (AOTN files + manifest.json)
      collections/                raw and refined collections per modality/layer
      models/<variant>/           bank/, head/, history.csv, report.json, nm2i_report.json
      sweep/                      scaling.csv (+ per-seed caches)
      report.md, summary.csv

Each stage checks for the artifacts it consumes and raises
:class:`MissingArtifactError` naming the stage that produces them.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .backbone import Backbone, pretrain_backbone
from .collection import load_refined, save_collections
from .config import RunConfig, parse_config, serialize
from .dataset import (MissingTable, SyntheticData, build_missing_table, generate_synthetic, load_data,
                      mask_split, missing_groups, save_data)
from .errors import InputError, MissingArtifactError
from .mcp import load_bank
from .nm2i import Nm2iReport, nm2i_report
from .serialize import load_checkpoint, save_checkpoint
from .tensor import Tensor
from .tuner import VARIANTS, EvalReport, PromptModel, TrainResult, build_prototypes, evaluate, fit, make_model

log = logging.getLogger(__name__)

PROMPTED = ("aoept", "no_inst", "baseline")
_SPLIT_OFFSET = {"train": 0, "val": 1, "test": 2}


def thread_cap() -> int:
    """Worker cap from ``AOEPT_THREADS`` (default 1)."""
    raw = os.environ.get("AOEPT_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise InputError(f"AOEPT_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise InputError(f"AOEPT_THREADS must be a positive integer, got {raw!r}")
    return n


def split_seed(table_seed: int, split: str) -> int:
    return 10 * table_seed + _SPLIT_OFFSET[split]


def make_tables(cfg: RunConfig, data: SyntheticData, eta_train: float | None = None,
                eta_test: float | None = None) -> tuple[dict[str, MissingTable], list[MissingTable]]:
    """Train/val tables (from the first table seed) and one test table per table seed."""
    eta_train = cfg.eta_train if eta_train is None else eta_train
    eta_test = cfg.eta_test if eta_test is None else eta_test
    mods = tuple(cfg.modalities)
    t0 = cfg.table_seeds[0]
    fit_tables = {s: build_missing_table(len(data[s]), eta_train, cfg.kind, split_seed(t0, s), mods)
                  for s in ("train", "val")}
    tests = [build_missing_table(len(data["test"]), eta_test, cfg.kind, split_seed(t, "test"), mods)
             for t in cfg.table_seeds]
    return fit_tables, tests


@dataclass
class RunDir:
    root: Path

    def __post_init__(self):
        self.root = Path(self.root)

    config = property(lambda self: self.root / "config.ini")
    data = property(lambda self: self.root / "data")
    tables = property(lambda self: self.root / "tables")
    backbone = property(lambda self: self.root / "backbone")
    collections = property(lambda self: self.root / "collections")
    sweep = property(lambda self: self.root / "sweep")

    def model(self, variant: str) -> Path:
        return self.root / "models" / variant

    def require(self, path: Path, command: str) -> Path:
        if not path.exists():
            raise MissingArtifactError(path, command)
        return path

    def load_config(self) -> RunConfig:
        return parse_config(self.require(self.config, "gen-data"))

    def load_data(self) -> SyntheticData:
        self.require(self.data / "meta.json", "gen-data")
        return load_data(self.data)

    def load_tables(self) -> tuple[dict[str, MissingTable], list[MissingTable]]:
        self.require(self.tables / "train.json", "gen-data")
        fit_tables = {s: MissingTable.from_json((self.tables / f"{s}.json").read_text()) for s in ("train", "val")}
        tests = sorted(self.tables.glob("test_*.json"), key=lambda p: int(p.stem.split("_")[1]))
        return fit_tables, [MissingTable.from_json(p.read_text()) for p in tests]

    def load_backbone(self) -> Backbone:
        self.require(self.backbone / "manifest.json", "pretrain")
        return Backbone.load(self.backbone)

    def trained_variants(self) -> list[str]:
        return [v for v in VARIANTS if (self.model(v) / "head" / "manifest.json").exists()]


# -- stages ----------------------------------------------------------------

def gen_data(cfg: RunConfig, out) -> RunDir:
    run = RunDir(out)
    run.root.mkdir(parents=True, exist_ok=True)
    run.config.write_text(serialize(cfg))
    data = generate_synthetic(cfg.gen_config())
    save_data(run.data, data)
    fit_tables, tests = make_tables(cfg, data)
    run.tables.mkdir(exist_ok=True)
    for old in run.tables.glob("test_*.json"):
        old.unlink()
    for split, table in fit_tables.items():
        (run.tables / f"{split}.json").write_text(table.to_json())
    for i, table in enumerate(tests):
        (run.tables / f"test_{i}.json").write_text(table.to_json())
    return run


def pretrain(out) -> Backbone:
    run = RunDir(out)
    cfg = run.load_config()
    data = run.load_data()
    bb = pretrain_backbone(cfg.backbone_config(), data["train"], epochs=cfg.pretrain_epochs,
                           seed=cfg.backbone_seed, lr=cfg.pretrain_lr, wd=cfg.pretrain_wd)
    bb.save(run.backbone)
    (run.backbone / "pretrain.json").write_text(json.dumps(
        {"train_accuracy": bb.pretrain_accuracy, "checksum": bb.saved_checksum,
         "parameters": bb.num_parameters()}, indent=2))
    return bb


def build_collections_stage(out):
    run = RunDir(out)
    cfg = run.load_config()
    bb = run.load_backbone()
    data = run.load_data()
    fit_tables, _ = run.load_tables()
    train_masked = mask_split(data["train"], fit_tables["train"], _placeholders(bb))
    raw, refined = build_prototypes(bb, train_masked, cfg.train_config())
    save_collections(run.collections, raw, refined,
                     {"eta": fit_tables["train"].eta, "kind": cfg.kind, "refine": cfg.refine,
                      "n_proto": cfg.n_proto, "backbone_checksum": bb.checksum()})
    return refined


def train_stage(out, variant: str = "aoept") -> TrainResult:
    if variant not in VARIANTS:
        raise InputError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    run = RunDir(out)
    cfg = run.load_config()
    bb = run.load_backbone()
    data = run.load_data()
    fit_tables, _ = run.load_tables()
    refined = None
    if variant in ("aoept", "no_inst"):
        run.require(run.collections / "manifest.json", "build-collections")
        refined = load_refined(run.collections)
    result = train_model(bb, data, fit_tables, cfg, variant, refined)
    save_model(run.model(variant), result, cfg)
    return result


def train_model(bb: Backbone, data, fit_tables, cfg: RunConfig, variant: str, refined=None,
                seed: int | None = None) -> TrainResult:
    tcfg = cfg.train_config(seed)
    ph = _placeholders(bb)
    train_set = mask_split(data["train"], fit_tables["train"], ph)
    val_set = mask_split(data["val"], fit_tables["val"], ph)
    patterns = [frozenset()] + missing_groups(fit_tables["train"].kind, bb.cfg.modalities)
    model = make_model(bb, variant, tcfg, refined, patterns)
    return fit(model, train_set, val_set, tcfg)


def save_model(directory, result: TrainResult, cfg: RunConfig) -> None:
    directory = Path(directory)
    model = result.model
    if model.bank is not None:
        model.bank.save(directory / "bank")
    save_checkpoint(directory / "head", {k: v.data for k, v in model.head.items()},
                    {"variant": model.variant, "best_epoch": result.best_epoch,
                     "trainable_parameters": model.num_trainable(),
                     "backbone_parameters": model.backbone.num_parameters(),
                     "backbone_checksum": model.backbone.checksum(),
                     "config": cfg.to_dict()})
    with open(directory / "history.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "L_CE", "L_CR", "val_acc"])
        writer.writeheader()
        writer.writerows(result.history)


def load_model(out, variant: str, backbone: Backbone | None = None) -> PromptModel:
    run = RunDir(out)
    directory = run.model(variant)
    command = "train" if variant in ("aoept", "no_inst") else "train-baseline"
    run.require(directory / "head" / "manifest.json", command)
    bb = backbone if backbone is not None else run.load_backbone()
    head_arrays, manifest = load_checkpoint(directory / "head")
    if manifest["backbone_checksum"] != bb.checksum():
        raise InputError(f"{variant} was trained against a different backbone; rerun `aoept {command}`")
    bank = load_bank(directory / "bank") if (directory / "bank").exists() else None
    head = {k: Tensor(v, requires_grad=True) for k, v in head_arrays.items()}
    return PromptModel(bb, bank, head, manifest["variant"])


def eval_stage(out, variants: Sequence[str] | None = None) -> dict[str, EvalReport]:
    run = RunDir(out)
    bb = run.load_backbone()
    data = run.load_data()
    _, tests = run.load_tables()
    variants = _variants(run, variants)
    reports = {}
    for v in variants:
        rep = evaluate(load_model(out, v, bb), data["test"], tests)
        (run.model(v) / "report.json").write_text(json.dumps(rep.to_json(), indent=2, sort_keys=True))
        reports[v] = rep
    return reports


def nm2i_stage(out, variants: Sequence[str] | None = None) -> dict[str, dict]:
    """NM²I on every test table; the stored report averages them and keeps each table's report."""
    run = RunDir(out)
    bb = run.load_backbone()
    data = run.load_data()
    _, tests = run.load_tables()
    variants = [v for v in _variants(run, variants) if v in PROMPTED]
    out_reports = {}
    for v in variants:
        model = load_model(out, v, bb)
        reports = [nm2i_report(model, data["test"], t, model_tag=v) for t in tests]
        merged = merge_nm2i(reports)
        (run.model(v) / "nm2i_report.json").write_text(json.dumps(merged, indent=2, sort_keys=True))
        out_reports[v] = merged
    return out_reports


def merge_nm2i(reports: Sequence[Nm2iReport]) -> dict:
    per_table = [r.to_json() for r in reports]
    first = per_table[0]
    per_layer = []
    for i, layer in enumerate(first["per_layer"]):
        row = {"layer": layer["layer"]}
        for key in ("nm2i", "mi", "h_p", "h_m"):
            row[key] = float(np.mean([r["per_layer"][i][key] for r in per_table]))
        row["count"] = int(sum(r["per_layer"][i]["count"] for r in per_table))
        per_layer.append(row)
    per_modality = {}
    for m in first["per_modality"]:
        per_modality[m] = float(np.mean([r["per_modality"][m]["mean"] for r in per_table]))
    return {"model_tag": first["model_tag"], "eta": first["eta"], "kind": first["kind"],
            "per_layer": per_layer, "per_modality": per_modality,
            "mean": float(np.mean([r["mean"] for r in per_table])),
            "skipped_count": int(sum(r["skipped_count"] for r in per_table)), "per_table": per_table}


def _variants(run: RunDir, variants) -> list[str]:
    present = run.trained_variants()
    if variants is None:
        if not present:
            raise MissingArtifactError(run.root / "models", "train")
        return present
    for v in variants:
        if v not in present:
            load_model(run.root, v)  # raises with the right command
    return list(variants)


def _placeholders(bb: Backbone) -> dict[str, int]:
    return dict(zip(bb.cfg.modalities, bb.cfg.vocab_sizes))


# -- scaling sweep ---------------------------------------------------------

SWEEP_FIELDS = ["method", "seed", "train_eta", "test_eta", "accuracy", "macro_f1"]


def _sweep_seed_dir(run: RunDir, seed: int) -> Path:
    return run.sweep / f"seed{seed}"


def _prepare_sweep_seed(cfg: RunConfig, root: Path) -> None:
    """Data and frozen backbone for one sweep seed, cached on disk."""
    if (root / "backbone" / "manifest.json").exists() and (root / "config.ini").exists():
        return
    gen_data(cfg, root)
    pretrain(root)


def _sweep_job(args) -> list[dict]:
    cfg, root, eta = args
    run = RunDir(root)
    bb = run.load_backbone()
    data = run.load_data()
    ph = _placeholders(bb)
    test_eta = cfg.sweep_eta_test
    seed = cfg.prompt_seed
    rows = []
    # AOEPT: prototypes see the train-η data; prompt tuning itself stays at the test-time rate
    coll_tables, _ = make_tables(cfg, data, eta_train=eta)
    _, refined = build_prototypes(bb, mask_split(data["train"], coll_tables["train"], ph), cfg.train_config())
    tune_tables, tests = make_tables(cfg, data, eta_train=test_eta, eta_test=test_eta)
    res = train_model(bb, data, tune_tables, cfg, "aoept", refined)
    rep = evaluate(res.model, data["test"], tests)
    rows.append({"method": "aoept", "seed": seed, "train_eta": eta, "test_eta": test_eta,
                 "accuracy": rep.accuracy, "macro_f1": rep.macro_f1})
    # baseline: trained on the train-η data directly
    res = train_model(bb, data, coll_tables, cfg, "baseline")
    rep = evaluate(res.model, data["test"], tests)
    rows.append({"method": "baseline", "seed": seed, "train_eta": eta, "test_eta": test_eta,
                 "accuracy": rep.accuracy, "macro_f1": rep.macro_f1})
    return rows


def scaling_sweep(cfg: RunConfig, out, workers: int | None = None) -> list[dict]:
    """Vary the training missing rate with the test rate fixed; one row per (method, seed, train η)."""
    run = RunDir(out)
    run.sweep.mkdir(parents=True, exist_ok=True)
    jobs = []
    for seed in cfg.sweep_seeds:
        scfg = cfg.with_seed(seed)
        root = _sweep_seed_dir(run, seed)
        _prepare_sweep_seed(scfg, root)
        jobs += [(scfg, root, float(eta)) for eta in cfg.sweep_etas]
    workers = thread_cap() if workers is None else workers
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_job, jobs))
    else:
        results = [_sweep_job(j) for j in jobs]
    rows = [r for rs in results for r in rs]
    with open(run.sweep / "scaling.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    return rows


def read_sweep(out) -> list[dict]:
    path = RunDir(out).require(RunDir(out).sweep / "scaling.csv", "scaling-sweep")
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("seed",):
            r[k] = int(r[k])
        for k in ("train_eta", "test_eta", "accuracy", "macro_f1"):
            r[k] = float(r[k])
    return rows


def summarize_sweep(rows: Iterable[dict]) -> dict[str, dict]:
    """Per method: mean accuracy per train η, the best η, the best-vs-worst spread and the seed spread.

    The seed spread is the mean over η of the max-minus-min accuracy across seeds.
    """
    rows = list(rows)
    out = {}
    for method in sorted({r["method"] for r in rows}):
        mine = [r for r in rows if r["method"] == method]
        etas = sorted({r["train_eta"] for r in mine}, reverse=True)
        by_eta = {e: [r["accuracy"] for r in mine if r["train_eta"] == e] for e in etas}
        means = {e: float(np.mean(v)) for e, v in by_eta.items()}
        best = max(etas, key=lambda e: (means[e], -e))
        out[method] = {
            "mean_accuracy": means,
            "best_eta": best,
            "spread": max(means.values()) - min(means.values()),
            "seed_spread": float(np.mean([max(v) - min(v) for v in by_eta.values()])),
        }
    return out


# -- report ----------------------------------------------------------------

def report(out) -> str:
    """Merge evaluation, NM²I and sweep results into report.md and summary.csv."""
    run = RunDir(out)
    rows = []
    for v in run.trained_variants():
        rep_path = run.model(v) / "report.json"
        if not rep_path.exists():
            raise MissingArtifactError(rep_path, "eval")
        rep = json.loads(rep_path.read_text())
        nm_path = run.model(v) / "nm2i_report.json"
        nm = json.loads(nm_path.read_text())["mean"] if nm_path.exists() else None
        rows.append({"variant": v, "accuracy": rep["accuracy"], "macro_f1": rep["macro_f1"],
                     "acc_min": rep["accuracy_range"][0], "acc_max": rep["accuracy_range"][1], "nm2i": nm})
    lines = ["# Run report", "", f"Run directory: `{run.root}`", ""]
    if rows:
        lines += ["| variant | accuracy | range | macro-F1 | NM²I |", "|---|---|---|---|---|"]
        for r in rows:
            nm = "n/a" if r["nm2i"] is None else f"{r['nm2i']:.4f}"
            lines.append(f"| {r['variant']} | {r['accuracy']:.4f} | {r['acc_min']:.4f}-{r['acc_max']:.4f} "
                         f"| {r['macro_f1']:.4f} | {nm} |")
        lines.append("")
    sweep_rows = []
    if (run.sweep / "scaling.csv").exists():
        sweep_rows = read_sweep(out)
        summary = summarize_sweep(sweep_rows)
        etas = sorted({r["train_eta"] for r in sweep_rows}, reverse=True)
        lines += ["## Scaling sweep (test η fixed)", "",
                  "| method | " + " | ".join(f"train η={e:g}" for e in etas) + " | best η | spread | seed spread |",
                  "|---|" + "---|" * (len(etas) + 3)]
        for method, s in summary.items():
            cells = " | ".join(f"{s['mean_accuracy'][e]:.4f}" for e in etas)
            lines.append(f"| {method} | {cells} | {s['best_eta']:g} | {s['spread']:.4f} | {s['seed_spread']:.4f} |")
        lines.append("")
    if not rows and not sweep_rows:
        raise MissingArtifactError(run.root / "models", "eval")
    text = "\n".join(lines)
    (run.root / "report.md").write_text(text)
    with open(run.root / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["section", "name", "x", "y"])
        for r in rows:
            writer.writerow(["eval", r["variant"], "accuracy", r["accuracy"]])
            if r["nm2i"] is not None:
                writer.writerow(["nm2i", r["variant"], "mean", r["nm2i"]])
        for r in sweep_rows:
            writer.writerow(["sweep", f"{r['method']}/seed{r['seed']}", r["train_eta"], r["accuracy"]])
    return text
