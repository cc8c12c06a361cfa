"""Train (or reuse from cache) every replicate the acceptance suite needs.

Usage: python3 scripts/train_acceptance.py [--jobs N] [--cache DIR]
"""

import argparse
import json
import logging
import time
from pathlib import Path

from numbisect.harness import ExperimentPlan, cached_replicates

ROOT = Path(__file__).resolve().parents[1]
RUNS = [("MLP", "ConstSize"), ("MicroCNN", "ConstSize"), ("MicroCNN", "ConstCirc"),
        ("MLP", "ConstArea"), ("MLP", "ConstCircContour")]


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--cache", default=str(ROOT / ".cache" / "training"))
    ap.add_argument("--plan", default=str(ROOT / "plans" / "acceptance.json"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    plan = ExperimentPlan.from_dict(json.loads(Path(args.plan).read_text()))
    for family, category in RUNS:
        t0 = time.perf_counter()
        nets = cached_replicates(plan, family, category, args.cache, args.jobs)
        acc = " ".join(f"{n.train_accuracy:.3f}" for n in nets)
        logging.info("%s %s: %.0fs, train accuracy %s", family, category, time.perf_counter() - t0, acc)


if __name__ == "__main__":
    main()
