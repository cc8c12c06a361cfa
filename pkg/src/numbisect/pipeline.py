"""Experiment pipeline: data -> training -> records -> curves, errors, transfer,
statistics, embeddings -> summary JSON plus a hashed run manifest."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from . import embed as E
from . import plots
from . import psychometrics as P
from . import stats as S
from . import tensornet as tn
from .harness import ExperimentPlan, TrainedNetwork, holdout_pool, run_jobs
from .stimgen import Dataset

log = logging.getLogger(__name__)

DEFAULT_ANALYSIS = {
    "alpha": 0.05,
    "ci_level": 0.95,
    "bootstrap_resamples": 1000,
    "embedding_cells": "diagonal",  # diagonal | all | none
    "embedding_seed_index": 0,
    "embedding_method": "PCA+tSNE",
    "tsne_iterations": 1000,
    "perplexity": 30.0,
    "pca_dims": 50,
    "null_shuffles": 1000,
}


class StageFailure(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")


def git_blob_hash(data: bytes) -> str:
    """Content hash in git's blob format, so `git hash-object` agrees."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, ensure_ascii=False, allow_nan=False) + "\n"


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_jsonable(v) for v in x.tolist()]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if np.isfinite(v) else None
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def plan_hash(plan: ExperimentPlan) -> str:
    return git_blob_hash(canonical_json(plan.to_dict()).encode())


def analysis_options(plan: ExperimentPlan) -> dict:
    unknown = set(plan.analysis) - set(DEFAULT_ANALYSIS)
    if unknown:
        from .harness import PlanError
        raise PlanError(f"unknown analysis keys {sorted(unknown)}")
    return {**DEFAULT_ANALYSIS, **plan.analysis}


@dataclass
class RunState:
    out: Path
    plan: ExperimentPlan
    artifacts: list[str] = field(default_factory=list)
    datasets: dict[str, str] = field(default_factory=dict)
    checkpoints: list[str] = field(default_factory=list)
    timings: dict[str, float] = field(default_factory=dict)

    def write(self, rel: str, text: str) -> Path:
        path = self.out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
        if rel not in self.artifacts:
            self.artifacts.append(rel)
        return path

    def write_frame(self, rel: str, frame: pd.DataFrame) -> Path:
        return self.write(rel, frame.to_csv(index=False, lineterminator="\n"))

    def manifest(self, complete: bool, failed_stage: str | None = None) -> dict:
        files = {}
        for rel in sorted(set(self.artifacts)):
            p = self.out / rel
            if p.exists():
                files[rel] = git_blob_hash(p.read_bytes())
        return {
            "tool": "numbisect", "tool_version": __version__,
            "plan_hash": plan_hash(self.plan), "complete": complete, "failed_stage": failed_stage,
            "datasets": dict(sorted(self.datasets.items())),
            "checkpoints": sorted(self.checkpoints), "artifacts": files,
            "stage_seconds": {k: round(v, 3) for k, v in self.timings.items()},
        }


def _run_label(family: str, train_cat: str, seed: int) -> str:
    return f"runs/{family}/{train_cat}/seed{seed}"


def _stem(*parts: str) -> str:
    return "__".join(parts)


# ---------------------------------------------------------------------------
# stages


def stage_data(state: RunState) -> tuple[dict[str, Dataset], dict[str, Dataset]]:
    plan = state.plan
    if plan.mode == "holdout":
        train = {f"all-but-{plan.held_out}": holdout_pool(plan, plan.held_out)}
    else:
        train = {c: plan.train_dataset(c) for c in plan.train_categories}
    test = {c: plan.test_dataset(c) for c in plan.test_categories}
    for split, group in (("train", train), ("test", test)):
        for cat, ds in group.items():
            state.datasets[f"{split}/{cat}"] = git_blob_hash(ds.content_bytes())
    return train, test


def stage_train(state: RunState, train: dict[str, Dataset], jobs: int) -> list[TrainedNetwork]:
    plan = state.plan
    specs = [(plan.network_config(f), ds, plan.train, s, cat)
             for f in plan.families for cat, ds in train.items() for s in plan.train.seeds]
    nets = run_jobs(specs, jobs)
    for net in nets:
        base = _run_label(net.config.family, net.train_category, net.seed)
        state.write(f"{base}/checkpoint.json", json.dumps(net.checkpoint(optimizer=False), sort_keys=True) + "\n")
        state.checkpoints.append(f"{base}/checkpoint.json")
        state.write(f"{base}/loss.csv", "step,loss\n" + "".join(
            f"{i},{v!r}\n" for i, v in enumerate(net.loss_log)))
    return nets


def stage_records(state: RunState, nets: list[TrainedNetwork], test: dict[str, Dataset],
                  opts: dict) -> tuple[pd.DataFrame, dict]:
    """Classify every test set with every network; keep embeddings for the chosen cells."""
    plan = state.plan
    wanted = _embedding_cells(plan, opts, nets)
    frames = []
    embeddings = {}
    for net in nets:
        network = net.network
        for cat, ds in test.items():
            logits, emb = network.embed(ds.images)
            frames.append(P.records_from_logits(logits, ds, family=net.config.family, seed=net.seed,
                                                train_cat=net.train_category, test_cat=cat))
            key = (net.config.family, net.train_category, cat)
            if key in wanted and wanted[key] == net.seed:
                embeddings[key] = E.EmbeddingSet(emb, ds.numerosities, {
                    "family": key[0], "train_cat": key[1], "test_cat": key[2], "seed": net.seed})
    records = pd.concat(frames, ignore_index=True)
    state.write_frame("records.csv", records)
    return records, embeddings


def _embedding_cells(plan: ExperimentPlan, opts: dict, nets: list[TrainedNetwork]) -> dict:
    mode = opts["embedding_cells"]
    if mode == "none":
        return {}
    seeds = list(plan.train.seeds)
    seed = seeds[min(int(opts["embedding_seed_index"]), len(seeds) - 1)]
    train_cats = sorted({n.train_category for n in nets})
    cells = {}
    for fam in plan.families:
        for tr in train_cats:
            for te in plan.test_categories:
                if mode == "all" or tr == te or plan.mode == "holdout":
                    cells[(fam, tr, te)] = seed
    return cells


def stage_analysis(state: RunState, records: pd.DataFrame, opts: dict) -> dict:
    plan = state.plan
    level, resamples = opts["ci_level"], int(opts["bootstrap_resamples"])
    cells, error_rows = [], []
    train_cats = sorted(records["train_cat"].unique(), key=_category_order)
    for fam in plan.families:
        grid = P.transfer_matrix(records, fam, train_cats, list(plan.test_categories), level, resamples)
        for (tr, te), cell in grid.items():
            stem = _stem(fam, tr, te)
            state.write_frame(f"curves/{stem}.csv", cell.curve.as_frame())
            state.write(f"curves/{stem}.svg", plots.curve_svg({f"{fam} {tr} -> {te}": cell.curve},
                                                              f"{fam}: train {tr}, test {te}"))
            try:
                fit = P.fit_logistic(cell.curve)
                fit_doc = {"midpoint": fit.midpoint, "spread": fit.spread, "residual": fit.residual}
            except P.DegenerateFit:
                fit_doc = None
            cells.append({"family": fam, "train_cat": tr, "test_cat": te,
                          "curve": cell.curve.points, "ci_low": cell.curve.ci_low,
                          "ci_high": cell.curve.ci_high, "shape": cell.shape.kind,
                          "seed_shapes": cell.seed_shapes, "errors": cell.errors, "logistic": fit_doc})
            if tr == te or plan.mode == "holdout":
                error_rows.append({"family": fam, "train_cat": tr, "test_cat": te, **cell.errors})
    errors = pd.DataFrame(error_rows, columns=["family", "train_cat", "test_cat", "few_error",
                                               "many_error", "total_error", "pooled_error"])
    state.write_frame("errors.csv", errors)
    return {"cells": cells, "error_table": error_rows}


def _category_order(name: str) -> tuple:
    from .stimgen import CATEGORIES
    order = [c.value for c in CATEGORIES]
    return (order.index(name) if name in order else len(order), name)


def stage_stats(state: RunState, records: pd.DataFrame, opts: dict) -> dict:
    """Tukey HSD over numerosities for every (family, test category) on the analysed cells."""
    plan = state.plan
    if len(plan.train.seeds) < 2:
        return {"skipped": "needs at least 2 replicate seeds"}
    samples = {}
    for fam in plan.families:
        for te in plan.test_categories:
            if plan.mode == "holdout":
                cell = records[(records["family"] == fam) & (records["test_cat"] == te)]
            else:
                cell = records[(records["family"] == fam) & (records["train_cat"] == te)
                               & (records["test_cat"] == te)]
            if not cell.empty:
                samples[(fam, te)] = P.seed_proportions(cell)
    if not samples:
        return {"skipped": "no cell trained and tested on the same category"}
    report = S.discriminability_report(samples, float(opts["alpha"]))
    state.write_frame("discriminability.csv", pd.DataFrame(report.rows))
    summary = report.summary()
    state.write("discriminability_pairs.svg", plots.bar_svg(
        summary["not_rejected_pairs"], "pairs not distinguished", "cells"))
    return summary


def stage_embeddings(state: RunState, embeddings: dict, opts: dict) -> list[dict]:
    out = []
    for key in sorted(embeddings):
        emb = embeddings[key]
        fam, tr, te = key
        proj = E.project_embeddings(emb, opts["embedding_method"], int(opts["pca_dims"]),
                                    float(opts["perplexity"]), int(opts["tsne_iterations"]),
                                    seed=int(emb.source["seed"]))
        score = E.ordering_score(proj, emb.numerosities)
        null = E.ordering_null(proj, emb.numerosities, int(opts["null_shuffles"]))
        stem = _stem(fam, tr, te)
        frame = pd.DataFrame({"x": proj.coords[:, 0], "y": proj.coords[:, 1],
                              "numerosity": emb.numerosities, "category": te})
        state.write_frame(f"projections/{stem}.csv", frame)
        state.write(f"projections/{stem}.svg", plots.scatter_svg(
            proj.coords, emb.numerosities, f"{fam}: train {tr}, test {te}"))
        out.append({"family": fam, "train_cat": tr, "test_cat": te, "seed": emb.source["seed"],
                    "embedding_dim": emb.dim, "method": proj.method, "objective": proj.objective,
                    "silhouette": score["silhouette"], "rho": score["rho"], "abs_rho": score["abs_rho"],
                    "null_line": null["line"], "ordered": score["abs_rho"] > null["line"]})
    return out


def run_experiment(plan: ExperimentPlan, out_dir, jobs: int = 1) -> dict:
    """Run every stage and return the summary; the manifest records partial failure."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    state = RunState(out, plan)
    opts = analysis_options(plan)
    state.write("plan.json", canonical_json(plan.to_dict()))
    stage = "data"
    try:
        t0 = time.perf_counter()
        train, test = stage_data(state)
        state.timings["data"] = time.perf_counter() - t0
        stage = "train"
        t0 = time.perf_counter()
        nets = stage_train(state, train, jobs)
        state.timings["train"] = time.perf_counter() - t0
        stage = "records"
        t0 = time.perf_counter()
        records, embeddings = stage_records(state, nets, test, opts)
        state.timings["records"] = time.perf_counter() - t0
        stage = "analysis"
        t0 = time.perf_counter()
        analysis = stage_analysis(state, records, opts)
        state.timings["analysis"] = time.perf_counter() - t0
        stage = "stats"
        t0 = time.perf_counter()
        stats = stage_stats(state, records, opts)
        state.timings["stats"] = time.perf_counter() - t0
        stage = "embeddings"
        t0 = time.perf_counter()
        ordering = stage_embeddings(state, embeddings, opts)
        state.timings["embeddings"] = time.perf_counter() - t0
        stage = "summary"
        summary = {
            "plan_hash": plan_hash(plan), "mode": plan.mode, "families": list(plan.families),
            "train": [{"family": n.config.family, "train_cat": n.train_category, "seed": n.seed,
                       "train_accuracy": n.train_accuracy, "final_loss": n.loss_log[-1],
                       "parameters": n.network.parameter_count} for n in nets],
            **analysis, "discriminability": stats, "ordering": ordering,
        }
        state.write("summary.json", canonical_json(_jsonable(summary)))
    except BaseException as exc:
        state.write("manifest.json", canonical_json(state.manifest(False, stage)))
        if isinstance(exc, (KeyboardInterrupt, SystemExit)):
            raise
        raise StageFailure(stage, exc) from exc
    state.write("manifest.json", canonical_json(state.manifest(True)))
    return summary


# ---------------------------------------------------------------------------
# manifest checks and report


class ReportInputError(ValueError):
    pass


def load_manifest(run_dir) -> dict:
    """Read manifest.json and verify every listed artifact against its hash."""
    run = Path(run_dir)
    path = run / "manifest.json"
    if not path.is_file():
        raise ReportInputError(f"no manifest.json in {run}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ReportInputError(f"corrupt manifest: {exc}") from exc
    if not isinstance(doc, dict) or "artifacts" not in doc:
        raise ReportInputError("manifest lacks an artifact table")
    for rel, digest in doc["artifacts"].items():
        p = run / rel
        if not p.is_file():
            raise ReportInputError(f"artifact {rel} is missing")
        if git_blob_hash(p.read_bytes()) != digest:
            raise ReportInputError(f"artifact {rel} does not match its recorded hash")
    return doc


def build_report(run_dir) -> str:
    """Markdown summary recomputed from records.csv; deterministic for identical inputs."""
    run = Path(run_dir)
    doc = load_manifest(run)
    if "records.csv" not in doc["artifacts"]:
        raise ReportInputError("run has no records.csv; nothing to report")
    records = pd.read_csv(run / "records.csv", dtype={"train_cat": str, "test_cat": str})
    if list(records.columns) != P.RECORD_COLUMNS:
        raise ReportInputError("records.csv has unexpected columns")
    lines = ["# Experiment report", ""]
    status = "complete" if doc.get("complete") else f"incomplete (failed at {doc.get('failed_stage')})"
    lines += [f"Run status: {status}. Plan hash `{doc.get('plan_hash')}`.", ""]
    lines += ["## Anchor error rates (%)", "",
              "| family | train | test | few | many | total |", "|---|---|---|---|---|---|"]
    for (fam, tr, te), cell in records.groupby(["family", "train_cat", "test_cat"], sort=True):
        if tr != te and not tr.startswith("all-but-"):
            continue
        err = P.anchor_error_rates(cell)
        lines.append(f"| {fam} | {tr} | {te} | {err['few_error']:.1f} | {err['many_error']:.1f} "
                     f"| {err['total_error']:.1f} |")
    lines += ["", "## Curve shapes", "", "| family | train | test | shape | curve |", "|---|---|---|---|---|"]
    galleries: dict[str, dict[tuple[str, str], str]] = {}
    for (fam, tr, te), cell in records.groupby(["family", "train_cat", "test_cat"], sort=True):
        pts = P.psychometric_points(cell)
        shape = P.classify_curve_shape(pts).kind
        svg = f"curves/{_stem(fam, tr, te)}.svg"
        link = f"![]({svg})" if (run / svg).is_file() else ""
        lines.append(f"| {fam} | {tr} | {te} | {shape} | {' '.join(f'{p:.2f}' for p in pts)} |")
        galleries.setdefault(fam, {})[(tr, te)] = f"{shape} {link}".strip()
    for fam, cells in sorted(galleries.items()):
        rows = sorted({tr for tr, _ in cells}, key=_category_order)
        cols = sorted({te for _, te in cells}, key=_category_order)
        lines += ["", f"### {fam} curves (rows: train, columns: test)", "",
                  plots.gallery_markdown(rows, cols, cells, corner="train/test")]
    summary_path = run / "summary.json"
    if summary_path.is_file():
        summary = json.loads(summary_path.read_text(encoding="utf-8"))
        disc = summary.get("discriminability", {})
        if "tested" in disc:
            lines += ["", "## Discriminability", "",
                      f"{disc['comparisons']} comparisons, {disc['excluded']} excluded, "
                      f"{disc['tested']} tested, {disc['not_rejected']} not rejected.", ""]
            if disc["not_rejected_pairs"]:
                lines += ["| pair | cells |", "|---|---|"]
                lines += [f"| {k} | {v} |" for k, v in disc["not_rejected_pairs"].items()]
            if (run / "discriminability_pairs.svg").is_file():
                lines += ["", "![](discriminability_pairs.svg)"]
        if summary.get("ordering"):
            lines += ["", "## Embedding order", "",
                      "| family | train | test | silhouette | abs rho | null line | projection |",
                      "|---|---|---|---|---|---|---|"]
            for o in summary["ordering"]:
                svg = f"projections/{_stem(o['family'], o['train_cat'], o['test_cat'])}.svg"
                lines.append(f"| {o['family']} | {o['train_cat']} | {o['test_cat']} | "
                             f"{o['silhouette']:.3f} | {o['abs_rho']:.3f} | {o['null_line']:.3f} | ![]({svg}) |")
    return "\n".join(lines) + "\n"


def write_report(run_dir) -> Path:
    path = Path(run_dir) / "report.md"
    path.write_text(build_report(run_dir), encoding="utf-8")
    return path


def load_checkpoint_network(path):
    """Network rebuilt from a run checkpoint."""
    from .models import Network, NetworkConfig
    params, _, meta = tn.load_checkpoint(path)
    return Network(NetworkConfig.from_dict(meta["config"]), params)


def write_csv_rows(path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
