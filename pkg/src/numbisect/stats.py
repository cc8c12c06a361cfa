"""Studentized range quantiles and Tukey HSD pairwise discriminability."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping, Sequence

import numpy as np
from scipy import optimize, special
from scipy.stats import chi2

EXCLUDED_PAIRS = ((1, 2), (6, 7))


class ConvergenceFailure(RuntimeError):
    pass


class InsufficientReplicates(ValueError):
    pass


_GL_Z = np.polynomial.legendre.leggauss(48)
_GL_S = np.polynomial.legendre.leggauss(32)


def _range_cdf_normal(w: np.ndarray, k: int) -> np.ndarray:
    """P(range of k iid N(0,1) <= w), vectorised over w.

    k * integral phi(z) [Phi(z) - Phi(z - w)]^(k-1) dz, over z in [-9, 9]
    split into panels for Gauss-Legendre quadrature.
    """
    w = np.atleast_1d(np.asarray(w, dtype=float))
    nodes, weights = _GL_Z
    edges = np.linspace(-9.0, 9.0, 7)
    total = np.zeros_like(w)
    for a, b in zip(edges[:-1], edges[1:]):
        z = 0.5 * (b - a) * nodes + 0.5 * (a + b)
        wz = 0.5 * (b - a) * weights
        inner = special.ndtr(z)[None, :] - special.ndtr(z[None, :] - w[:, None])
        total += (np.clip(inner, 0.0, 1.0) ** (k - 1)) @ (wz * np.exp(-0.5 * z * z) / math.sqrt(2 * math.pi))
    return np.clip(k * total, 0.0, 1.0)


@lru_cache(maxsize=256)
def _scale_quadrature(df: float) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights integrating against the density of s = sqrt(chi2_df / df).

    Works in u = log(s), where the density is
    df^(df/2) s^df exp(-df s^2 / 2) / (Gamma(df/2) 2^(df/2 - 1)).
    """
    lo = 0.5 * math.log(chi2.ppf(1e-16, df) / df)
    hi = 0.5 * math.log(chi2.isf(1e-16, df) / df)
    edges = np.linspace(lo, hi, 13)
    nodes, weights = _GL_S
    u = np.concatenate([0.5 * (b - a) * nodes + 0.5 * (a + b) for a, b in zip(edges[:-1], edges[1:])])
    wu = np.concatenate([0.5 * (b - a) * weights for a, b in zip(edges[:-1], edges[1:])])
    half = df / 2.0
    log_density = (half * math.log(df) + df * u - half * np.exp(2 * u)
                   - special.gammaln(half) - (half - 1.0) * math.log(2.0))
    return np.exp(u), wu * np.exp(log_density)


def studentized_range_cdf(q: float, k: int, df: float) -> float:
    """P(Q <= q) for the studentized range of k means with df error degrees of freedom."""
    if q <= 0:
        return 0.0
    if math.isinf(df):
        return float(_range_cdf_normal(np.array([q]), k)[0])
    s, w = _scale_quadrature(float(df))
    return float(np.clip(_range_cdf_normal(q * s, k) @ w, 0.0, 1.0))


@lru_cache(maxsize=1024)
def studentized_range_q(alpha: float, k: int, df: float) -> float:
    """Upper-alpha critical value of the studentized range distribution."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    if k < 2 or df < 1:
        raise ValueError("need k >= 2 groups and df >= 1")
    target = 1.0 - alpha
    hi = 1.0
    while studentized_range_cdf(hi, k, df) < target:
        hi *= 2
        if hi > 1e6:
            raise ConvergenceFailure(f"could not bracket q for alpha={alpha}, k={k}, df={df}")
    lo = 0.0
    try:
        q, info = optimize.brentq(lambda x: studentized_range_cdf(x, k, df) - target, lo, hi,
                                  xtol=1e-12, rtol=1e-12, maxiter=200, full_output=True)
    except (ValueError, RuntimeError) as exc:
        raise ConvergenceFailure(str(exc)) from exc
    if not info.converged:
        raise ConvergenceFailure(f"root finding did not converge for alpha={alpha}, k={k}, df={df}")
    return float(q)


# ---------------------------------------------------------------------------
# Tukey HSD


@dataclass(frozen=True)
class PairResult:
    pair: tuple
    mean_diff: float
    q_stat: float
    critical: float
    significant: bool
    flags: tuple[str, ...] = ()


def tukey_hsd(groups: Mapping, alpha: float = 0.05) -> list[PairResult]:
    """All pairwise comparisons of a balanced design at family-wise level alpha.

    ``groups`` maps a group label to its samples. mean_diff is mean_j - mean_i
    for pair (i, j) in label order. Zero pooled variance with unequal means is
    flagged DegenerateVariance and counted significant.
    """
    labels = list(groups)
    if len(labels) < 2:
        raise ValueError("Tukey HSD needs at least two groups")
    data = [np.asarray(groups[g], dtype=float).ravel() for g in labels]
    sizes = {len(d) for d in data}
    if len(sizes) != 1:
        raise ValueError(f"unbalanced design: group sizes {sorted(sizes)}")
    n = sizes.pop()
    if n < 2:
        raise InsufficientReplicates("each group needs at least 2 replicates")
    k = len(labels)
    means = np.array([d.mean() for d in data])
    df = k * (n - 1)
    msw = float(sum(((d - d.mean()) ** 2).sum() for d in data) / df)
    crit = studentized_range_q(alpha, k, df)
    se = math.sqrt(msw / n)
    scale = max(1.0, float(np.abs(means).max()))
    rows = []
    for i, j in itertools.combinations(range(k), 2):
        diff = float(means[j] - means[i])
        if se > 1e-12 * scale:
            q = abs(diff) / se
            rows.append(PairResult((labels[i], labels[j]), diff, q, crit, q > crit))
        else:
            differs = abs(diff) > 1e-12 * scale
            rows.append(PairResult((labels[i], labels[j]), diff, math.inf if differs else 0.0, crit,
                                   differs, ("DegenerateVariance",) if differs else ()))
    return rows


@dataclass
class DiscriminabilityReport:
    rows: list[dict]
    comparisons: int
    excluded: int
    tested: int
    not_rejected: int
    histogram: dict[tuple[int, int], int] = field(default_factory=dict)

    def summary(self) -> dict:
        return {
            "comparisons": self.comparisons, "excluded": self.excluded, "tested": self.tested,
            "not_rejected": self.not_rejected,
            "not_rejected_pairs": {f"{a}-{b}": c for (a, b), c in sorted(self.histogram.items())},
        }


def discriminability_report(samples: Mapping[tuple[str, str], Mapping[int, Sequence[float]]],
                            alpha: float = 0.05,
                            excluded_pairs: Sequence[tuple[int, int]] = EXCLUDED_PAIRS) -> DiscriminabilityReport:
    """Tukey HSD over numerosities for each (model, category).

    ``samples[(model, category)][n]`` holds one proportion-of-'many' value per
    trained replicate. Pairs in ``excluded_pairs`` are reported but left out
    of the tested total and the histogram of non-rejected pairs.
    """
    excluded_set = {tuple(sorted(p)) for p in excluded_pairs}
    rows: list[dict] = []
    comparisons = excluded = not_rejected = 0
    hist: dict[tuple[int, int], int] = {}
    for (model, category) in sorted(samples):
        groups = {n: samples[(model, category)][n] for n in sorted(samples[(model, category)])}
        for res in tukey_hsd(groups, alpha):
            pair = tuple(sorted(res.pair))
            comparisons += 1
            is_excluded = pair in excluded_set
            if is_excluded:
                excluded += 1
            elif not res.significant:
                not_rejected += 1
                hist[pair] = hist.get(pair, 0) + 1
            rows.append({"model": model, "category": category, "pair": f"{pair[0]}-{pair[1]}",
                         "mean_diff": res.mean_diff, "q_stat": res.q_stat, "critical": res.critical,
                         "significant": res.significant, "excluded": is_excluded,
                         "flags": ";".join(res.flags)})
    return DiscriminabilityReport(rows, comparisons, excluded, comparisons - excluded, not_rejected, hist)


# ---------------------------------------------------------------------------
# oracles used by tests and diagnostics


def monte_carlo_q(alpha: float, k: int, df: float, draws: int = 10_000_000,
                  seed: int = 0, chunk: int = 1_000_000) -> float:
    """Empirical upper-alpha quantile of max-range / s over simulated normal samples."""
    rng = np.random.default_rng(seed)
    out = np.empty(draws)
    for start in range(0, draws, chunk):
        m = min(chunk, draws - start)
        z = rng.standard_normal((m, k))
        s = np.sqrt(rng.chisquare(df, m) / df)
        out[start:start + m] = (z.max(axis=1) - z.min(axis=1)) / s
    return float(np.quantile(out, 1 - alpha))


def permutation_max_q(groups: Mapping, alpha: float = 0.05, permutations: int = 2000,
                      seed: int = 0) -> list[tuple[tuple, bool]]:
    """Permutation analogue of Tukey HSD using the studentized max-range statistic."""
    labels = list(groups)
    data = np.stack([np.asarray(groups[g], dtype=float).ravel() for g in labels])
    k, n = data.shape
    df = k * (n - 1)

    def studentized_diffs(x):
        m = x.mean(axis=-1)
        msw = ((x - m[..., None]) ** 2).sum(axis=(-1, -2)) / df
        return m, np.sqrt(msw / n)

    rng = np.random.default_rng(seed)
    flat = data.ravel()
    perms = np.stack([rng.permutation(flat) for _ in range(permutations)]).reshape(permutations, k, n)
    pm, pse = studentized_diffs(perms)
    null = (pm.max(axis=1) - pm.min(axis=1)) / pse
    crit = np.quantile(null, 1 - alpha)
    m, se = studentized_diffs(data)
    return [((labels[i], labels[j]), bool(abs(m[j] - m[i]) / se > crit))
            for i, j in itertools.combinations(range(k), 2)]
