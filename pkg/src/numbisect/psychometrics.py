"""Responses -> psychometric curves, anchor error tables, shape taxonomy
and cross-category transfer grids."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from .models import Network
from .stimgen import NUMEROSITIES, Dataset
from .tensornet import softmax_rows

RECORD_COLUMNS = ["model", "family", "seed", "train_cat", "test_cat", "n", "index", "p_many", "label"]


class MissingNumerosity(ValueError):
    pass


class EmptySample(ValueError):
    pass


class DegenerateFit(ValueError):
    pass


def classify_batch(network: Network, dataset: Dataset, *, model: str = "", seed: int = 0,
                   train_cat: str = "", test_cat: str | None = None,
                   batch_size: int = 256) -> pd.DataFrame:
    """One record per image: p_many = softmax(logits)[many]; ties go to 'few'."""
    logits = network.logits(dataset.images, batch_size)
    return records_from_logits(logits, dataset, model=model, family=network.config.family,
                               seed=seed, train_cat=train_cat, test_cat=test_cat)


def records_from_logits(logits: np.ndarray, dataset: Dataset, *, model: str = "", family: str = "",
                        seed: int = 0, train_cat: str = "", test_cat: str | None = None) -> pd.DataFrame:
    logits = np.asarray(logits, dtype=float)
    if logits.ndim != 2 or logits.shape != (len(dataset), 2):
        from .tensornet import ShapeMismatch
        raise ShapeMismatch(f"logits {logits.shape} for {len(dataset)} images")
    p_many = softmax_rows(logits)[:, 1]
    ns = dataset.numerosities.astype(int)
    index = np.zeros(len(ns), dtype=int)
    seen: dict[int, int] = {}
    for i, n in enumerate(ns):
        index[i] = seen.get(n, 0)
        seen[n] = index[i] + 1
    test_cat = test_cat if test_cat is not None else (dataset.categories[0] if len(dataset) else "")
    return pd.DataFrame({
        "model": model or family, "family": family, "seed": seed, "train_cat": train_cat,
        "test_cat": test_cat, "n": ns, "index": index, "p_many": p_many,
        "label": np.where(p_many > 0.5, "many", "few"),
    }, columns=RECORD_COLUMNS)


# ---------------------------------------------------------------------------
# bootstrap and curves


def bootstrap_ci(samples, level: float = 0.95, resamples: int = 1000, seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean of ``samples``."""
    x = np.asarray(samples, dtype=float).ravel()
    if x.size == 0:
        raise EmptySample("bootstrap needs at least one sample")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, x.size, size=(resamples, x.size))
    means = x[idx].mean(axis=1)
    tail = (1.0 - level) / 2
    low, high = np.quantile(means, [tail, 1.0 - tail])
    return float(low), float(high)


@dataclass
class PsychometricCurve:
    points: np.ndarray  # proportion of 'many' for n = 1..7
    ci_low: np.ndarray
    ci_high: np.ndarray
    counts: np.ndarray
    meta: dict = field(default_factory=dict)

    def as_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"n": list(NUMEROSITIES), "proportion_many": self.points,
                             "ci_low": self.ci_low, "ci_high": self.ci_high, "count": self.counts})


def _curve_seed(meta: Mapping, n: int, level: float) -> int:
    key = "|".join(f"{k}={meta[k]}" for k in sorted(meta)) + f"|n={n}|level={level}"
    return zlib.crc32(key.encode())


def psychometric_curve(records: pd.DataFrame, level: float = 0.95, resamples: int = 1000,
                       meta: Mapping | None = None) -> PsychometricCurve:
    """Per-numerosity proportion of 'many' over all images and seeds, with bootstrap CIs.

    CIs are widened to include the point estimate when the percentile
    interval of a skewed resample distribution misses it.
    """
    meta = dict(meta or {})
    points, lows, highs, counts = [], [], [], []
    for n in NUMEROSITIES:
        outcomes = (records.loc[records["n"] == n, "label"] == "many").to_numpy(dtype=float)
        if outcomes.size == 0:
            raise MissingNumerosity(f"no records for numerosity {n}")
        p = float(outcomes.mean())
        lo, hi = bootstrap_ci(outcomes, level, resamples, _curve_seed(meta, n, level))
        points.append(p)
        lows.append(min(lo, p))
        highs.append(max(hi, p))
        counts.append(outcomes.size)
    return PsychometricCurve(np.array(points), np.array(lows), np.array(highs), np.array(counts), meta)


def anchor_error_rates(records: pd.DataFrame) -> dict[str, float]:
    """Few/many/total anchor error in percent; total averages the two classes."""
    few = records[records["n"].isin((1, 2))]
    many = records[records["n"].isin((6, 7))]
    if few.empty or many.empty:
        raise MissingNumerosity("anchor error rates need records for both few and many anchors")
    few_err = 100.0 * float((few["label"] == "many").mean())
    many_err = 100.0 * float((many["label"] == "few").mean())
    pooled = 100.0 * float(((few["label"] == "many").sum() + (many["label"] == "few").sum())
                           / (len(few) + len(many)))
    return {"few_error": few_err, "many_error": many_err,
            "total_error": (few_err + many_err) / 2, "pooled_error": pooled}


# ---------------------------------------------------------------------------
# curve fitting and shape taxonomy


@dataclass(frozen=True)
class LogisticFit:
    midpoint: float
    spread: float
    residual: float


def _logistic(n, mu, sigma):
    return 1.0 / (1.0 + np.exp(-(n - mu) / sigma))


def fit_logistic(curve, min_spread: float = 1e-3, iterations: int = 200) -> LogisticFit:
    """Least-squares fit of 1 / (1 + exp(-(n - mu) / sigma)).

    Starts from the best point of a coarse (mu, sigma) grid and refines
    with damped Gauss-Newton. Raises DegenerateFit for a constant curve.
    """
    y = np.asarray(getattr(curve, "points", curve), dtype=float)
    if y.shape != (7,):
        raise ValueError("a psychometric curve has 7 points")
    if np.ptp(y) < 1e-12:
        raise DegenerateFit("constant curve has no midpoint")
    n = np.arange(1.0, 8.0)

    def sse(mu, sigma):
        return float(((_logistic(n, mu, sigma) - y) ** 2).sum())

    grid = [(mu, s) for mu in np.linspace(0.0, 8.0, 33) for s in (-2, -1, -0.5, -0.2, 0.2, 0.5, 1, 2)]
    mu, sigma = min(grid, key=lambda ms: sse(*ms))
    best = sse(mu, sigma)
    damping = 1e-3
    for _ in range(iterations):
        p = _logistic(n, mu, sigma)
        r = p - y
        dp = p * (1 - p)
        J = np.column_stack([-dp / sigma, -dp * (n - mu) / sigma ** 2])
        A = J.T @ J
        g = J.T @ r
        improved = False
        while damping < 1e8:
            try:
                delta = np.linalg.solve(A + damping * np.diag(np.diag(A) + 1e-12), -g)
            except np.linalg.LinAlgError:
                damping *= 10
                continue
            new_mu, new_sigma = mu + delta[0], sigma + delta[1]
            if abs(new_sigma) < min_spread:
                new_sigma = np.copysign(min_spread, sigma)
            cand = sse(new_mu, new_sigma)
            if cand < best:
                mu, sigma, best = new_mu, new_sigma, cand
                damping = max(damping / 10, 1e-12)
                improved = True
                break
            damping *= 10
        if not improved or np.abs(delta).max() < 1e-12:
            break
    return LogisticFit(float(mu), float(sigma), best)


def spearman(x, y) -> float:
    """Spearman rank correlation with average ranks; 0 when either side is constant."""
    rx = rankdata(x)
    ry = rankdata(y)
    rx = rx - rx.mean()
    ry = ry - ry.mean()
    denom = np.sqrt((rx ** 2).sum() * (ry ** 2).sum())
    return 0.0 if denom == 0 else float((rx * ry).sum() / denom)


SHAPES = ("sigmoid", "flat", "inverted", "all_or_none_few", "all_or_none_many")


@dataclass(frozen=True)
class CurveShape:
    kind: str
    diagnostics: dict


@dataclass(frozen=True)
class ShapeThresholds:
    low: float = 0.25
    high: float = 0.75
    rho: float = 0.8
    saturation: float = 0.9
    flat_range: float = 0.3


def classify_curve_shape(curve, thresholds: ShapeThresholds = ShapeThresholds()) -> CurveShape:
    y = np.asarray(getattr(curve, "points", curve), dtype=float)
    if y.shape != (7,):
        raise ValueError("a psychometric curve has 7 points")
    t = thresholds
    start = float((y[0] + y[1]) / 2)
    end = float((y[5] + y[6]) / 2)
    rho = spearman(np.arange(1, 8), y)
    diag = {"start": start, "end": end, "rho": rho, "range": float(np.ptp(y)),
            "slope_sign": int(np.sign(end - start))}
    if np.all(y >= t.saturation):
        kind = "all_or_none_many"
    elif np.all(1 - y >= t.saturation):
        kind = "all_or_none_few"
    elif start <= t.low and end >= t.high and rho >= t.rho:
        kind = "sigmoid"
    elif start >= t.high and end <= t.low and rho <= -t.rho:
        kind = "inverted"
    else:
        kind = "flat"
        diag["residual"] = bool(np.ptp(y) > t.flat_range)
    return CurveShape(kind, diag)


# ---------------------------------------------------------------------------
# transfer grids


@dataclass
class TransferCell:
    curve: PsychometricCurve
    shape: CurveShape
    seed_shapes: list[str]
    errors: dict


def transfer_matrix(records: pd.DataFrame, family: str, train_cats: Sequence[str],
                    test_cats: Sequence[str], level: float = 0.95,
                    resamples: int = 1000) -> dict[tuple[str, str], TransferCell]:
    """Curves and shapes for every (train, test) pair of one family.

    Cells are computed from the same records as single-category curves, so
    the diagonal is exactly the within-category result.
    """
    fam = records[records["family"] == family]
    grid: dict[tuple[str, str], TransferCell] = {}
    for tr in train_cats:
        for te in test_cats:
            cell = fam[(fam["train_cat"] == tr) & (fam["test_cat"] == te)]
            grid[(tr, te)] = summarize_cell(cell, family, tr, te, level, resamples)
    return grid


def summarize_cell(cell: pd.DataFrame, family: str, train_cat: str, test_cat: str,
                   level: float = 0.95, resamples: int = 1000) -> TransferCell:
    meta = {"family": family, "train_cat": train_cat, "test_cat": test_cat}
    curve = psychometric_curve(cell, level, resamples, meta)
    seed_shapes = [classify_curve_shape(psychometric_points(g)).kind
                   for _, g in cell.groupby("seed", sort=True)]
    return TransferCell(curve, classify_curve_shape(curve), seed_shapes, anchor_error_rates(cell))


def psychometric_points(records: pd.DataFrame) -> np.ndarray:
    """Point estimates only (no bootstrap)."""
    out = []
    for n in NUMEROSITIES:
        sel = records.loc[records["n"] == n, "label"]
        if sel.empty:
            raise MissingNumerosity(f"no records for numerosity {n}")
        out.append(float((sel == "many").mean()))
    return np.array(out)


def seed_proportions(records: pd.DataFrame) -> dict[int, np.ndarray]:
    """{n: per-seed proportion of 'many'} in seed order, for the HSD test."""
    table = (records.assign(many=(records["label"] == "many").astype(float))
             .groupby(["n", "seed"], sort=True)["many"].mean())
    return {int(n): table.loc[n].to_numpy() for n in NUMEROSITIES if n in table.index.get_level_values(0)}
