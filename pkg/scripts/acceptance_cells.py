"""Per-seed curves, shapes and anchor errors for the trained acceptance cells.

Reads the training cache filled by train_acceptance.py; cells whose
replicates are not all cached are skipped.

Usage: python3 scripts/acceptance_cells.py [--cache DIR] [--plan FILE]
"""

import argparse
import json
from pathlib import Path

import numpy as np

from numbisect import psychometrics as P
from numbisect.harness import ExperimentPlan, cache_key, cached_replicates

ROOT = Path(__file__).resolve().parents[1]
CELLS = [("MLP", "ConstSize", "ConstSize"), ("MicroCNN", "ConstSize", "ConstSize"),
         ("MicroCNN", "ConstCirc", "ConstSize"), ("MicroCNN", "ConstCirc", "ConstCirc"),
         ("MLP", "ConstArea", "ConstArea"), ("MLP", "ConstCircContour", "ConstCircContour")]


def fully_cached(plan, family, category, cache) -> bool:
    ds = plan.train_dataset(category)
    cfg = plan.network_config(family)
    return all((cache / f"{cache_key(cfg, ds, plan.train, s, category)}.json").is_file()
               for s in plan.train.seeds)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--cache", default=str(ROOT / ".cache" / "training"))
    ap.add_argument("--plan", default=str(ROOT / "plans" / "acceptance.json"))
    args = ap.parse_args()
    plan = ExperimentPlan.from_dict(json.loads(Path(args.plan).read_text()))
    cache = Path(args.cache)
    tests = {}
    for family, train_cat, test_cat in CELLS:
        if not fully_cached(plan, family, train_cat, cache):
            print(f"{family} {train_cat}->{test_cat}: not cached yet")
            continue
        tests.setdefault(test_cat, plan.test_dataset(test_cat))
        print(f"{family} {train_cat}->{test_cat}")
        totals = []
        for net in cached_replicates(plan, family, train_cat, cache):
            rec = P.classify_batch(net.network, tests[test_cat], seed=net.seed,
                                   train_cat=train_cat, test_cat=test_cat)
            pts = P.psychometric_points(rec)
            shape = P.classify_curve_shape(pts)
            err = P.anchor_error_rates(rec)
            totals.append(err["total_error"])
            print(f"  seed {net.seed}: acc {net.train_accuracy:.3f} curve {np.round(pts, 2).tolist()} "
                  f"{shape.kind} (rho {shape.diagnostics['rho']:.2f}) total error {err['total_error']:.1f}%")
        print(f"  mean total error {np.mean(totals):.2f}%")


if __name__ == "__main__":
    main()
