"""Command line entry points: generate, experiment, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .harness import Divergence, ExperimentPlan, PlanError
from .pipeline import (ReportInputError, StageFailure, canonical_json, git_blob_hash, plan_hash,
                       write_report)
from .stimgen import CATEGORIES, PlacementInfeasible, export_dataset, write_feature_audit

log = logging.getLogger("numbisect")

EXIT_OK = 0
EXIT_PLAN = 2
EXIT_INFEASIBLE = 3
EXIT_REPORT = 4
EXIT_DIVERGENCE = 5


def load_plan(path) -> ExperimentPlan:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise PlanError(f"cannot read plan {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise PlanError("plan must be a JSON object")
    return ExperimentPlan.from_dict(doc)


def _categories(plan: ExperimentPlan) -> list[str]:
    wanted = set(plan.train_categories) | set(plan.test_categories)
    return [c.value for c in CATEGORIES if c.value in wanted]


def cmd_generate(plan_path, out_dir) -> int:
    plan = load_plan(plan_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "plan.json").write_text(canonical_json(plan.to_dict()), encoding="utf-8")
    datasets, artifacts = {}, {}
    for cat in _categories(plan):
        for split, make in (("train", plan.train_dataset), ("test", plan.test_dataset)):
            ds = make(cat)
            sub = out / split / cat
            manifest = export_dataset(ds, sub, prefix=f"{cat}_{split}")
            write_feature_audit(ds, sub / "features.csv")
            datasets[f"{split}/{cat}"] = git_blob_hash(ds.content_bytes())
            for p in (manifest, sub / "features.csv"):
                artifacts[str(p.relative_to(out))] = git_blob_hash(p.read_bytes())
            log.info("%s/%s: %d images", split, cat, len(ds))
    doc = {"plan_hash": plan_hash(plan), "datasets": datasets, "artifacts": dict(sorted(artifacts.items()))}
    (out / "manifest.json").write_text(canonical_json(doc), encoding="utf-8")
    return EXIT_OK


def cmd_experiment(plan_path, out_dir, jobs: int = 1) -> int:
    from .pipeline import run_experiment

    plan = load_plan(plan_path)
    summary = run_experiment(plan, out_dir, jobs)
    log.info("wrote %s (%d curve cells)", Path(out_dir) / "summary.json", len(summary["cells"]))
    return EXIT_OK


def cmd_report(run_dir) -> int:
    path = write_report(run_dir)
    log.info("wrote %s", path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="numbisect", description=__doc__)
    sub = ap.add_subparsers(dest="verb", required=True)
    for verb in ("generate", "experiment", "report"):
        p = sub.add_parser(verb)
        if verb != "report":
            p.add_argument("--plan", required=True, help="plan JSON file")
        p.add_argument("--out", required=True,
                       help="run directory to read" if verb == "report" else "output directory")
        p.add_argument("--jobs", type=int, default=1, help="parallel training processes")
        p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return ap


def _exit_code(exc: BaseException) -> int | None:
    if isinstance(exc, PlanError):
        return EXIT_PLAN
    if isinstance(exc, PlacementInfeasible):
        return EXIT_INFEASIBLE
    if isinstance(exc, Divergence):
        return EXIT_DIVERGENCE
    if isinstance(exc, ReportInputError):
        return EXIT_REPORT
    return None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        log.error("--jobs must be >= 1")
        return EXIT_PLAN
    try:
        if args.verb == "generate":
            return cmd_generate(args.plan, args.out)
        if args.verb == "experiment":
            return cmd_experiment(args.plan, args.out, args.jobs)
        return cmd_report(args.out)
    except StageFailure as exc:
        code = _exit_code(exc.cause)
        log.error("%s", exc)
        if code is None:
            raise
        return code
    except (PlanError, PlacementInfeasible, Divergence, ReportInputError) as exc:
        log.error("%s", exc)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
