import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats as sps

from numbisect import stats as S
from oracles import pairwise_tukey


def effect_groups(rng, k=7, n=10, spread=0.6):
    """Balanced groups whose true means step up with a random size, so decisions are mixed."""
    means = np.cumsum(rng.uniform(0, spread, k))
    return {g + 1: rng.normal(means[g], 1.0, n) for g in range(k)}


# ---------------------------------------------------------------------------
# studentized range


@pytest.mark.parametrize("df", [1, 3, 10, 60, 1000])
def test_two_groups_reduce_to_t(df):
    for alpha in (0.01, 0.05, 0.2):
        expected = math.sqrt(2) * sps.t.ppf(1 - alpha / 2, df)
        assert S.studentized_range_q(alpha, 2, df) == pytest.approx(expected, rel=1e-7)


@pytest.mark.parametrize("k,df", [(3, 10), (5, 20), (7, 60), (7, 63), (12, 5), (4, 2)])
def test_quantiles_match_scipy(k, df):
    for alpha in (0.01, 0.05, 0.1):
        assert S.studentized_range_q(alpha, k, df) == pytest.approx(
            sps.studentized_range.ppf(1 - alpha, k, df), rel=1e-6)


def test_infinite_df_matches_normal_range():
    assert S.studentized_range_cdf(3.314, 3, math.inf) == pytest.approx(0.95, abs=1e-3)


def test_quantile_matches_monte_carlo_small():
    # a cheaper version of the 10^7-draw acceptance check
    assert abs(S.studentized_range_q(0.05, 3, 10) - S.monte_carlo_q(0.05, 3, 10, draws=1_000_000)) < 0.03


def test_monotone_in_k_and_alpha():
    grid = [[S.studentized_range_q(a, k, 20) for k in range(2, 9)] for a in (0.01, 0.05, 0.1, 0.5, 0.9, 0.99)]
    arr = np.array(grid)
    assert (np.diff(arr, axis=1) > 0).all()
    assert (np.diff(arr, axis=0) < 0).all()
    assert arr[-1, 0] < 0.05


def test_cdf_edges_and_bad_arguments():
    assert S.studentized_range_cdf(0.0, 3, 10) == 0.0
    assert S.studentized_range_cdf(50.0, 3, 10) == pytest.approx(1.0, abs=1e-9)
    for args in ((0.0, 3, 10), (1.0, 3, 10), (0.05, 1, 10), (0.05, 3, 0)):
        with pytest.raises(ValueError):
            S.studentized_range_q(*args)


# ---------------------------------------------------------------------------
# Tukey HSD


def test_identical_groups_have_no_significant_pairs():
    x = np.random.default_rng(0).random(10)
    rows = S.tukey_hsd({n: x.copy() for n in range(1, 8)})
    assert len(rows) == 21 and not any(r.significant for r in rows)


def test_separated_groups_are_significant():
    rng = np.random.default_rng(1)
    rows = S.tukey_hsd({"a": 1e-6 * rng.standard_normal(10), "b": 1 + 1e-6 * rng.standard_normal(10)})
    assert rows[0].significant and rows[0].mean_diff == pytest.approx(1, abs=1e-5)


@given(st.integers(0, 2 ** 31), st.integers(2, 8), st.integers(2, 12))
def test_matches_textbook_formula(seed, k, n):
    groups = effect_groups(np.random.default_rng(seed), k, n)
    rows = S.tukey_hsd(groups)
    oracle = pairwise_tukey({g: list(v) for g, v in groups.items()}, S.studentized_range_q(0.05, k, k * (n - 1)))
    assert {r.pair: r.significant for r in rows} == oracle


def test_relabeling_permutes_rows_only():
    groups = effect_groups(np.random.default_rng(3))
    rows = {frozenset(r.pair): (abs(r.mean_diff), r.q_stat, r.significant) for r in S.tukey_hsd(groups)}
    order = [4, 7, 1, 3, 6, 2, 5]
    shuffled = {g: groups[g] for g in order}
    again = {frozenset(r.pair): (abs(r.mean_diff), r.q_stat, r.significant) for r in S.tukey_hsd(shuffled)}
    assert rows.keys() == again.keys()
    for key in rows:
        assert rows[key][2] == again[key][2]
        np.testing.assert_allclose(rows[key][:2], again[key][:2], rtol=1e-12)


def test_agreement_with_permutation_oracle():
    rng = np.random.default_rng(7)
    agree = total = 0
    for i in range(30):
        groups = effect_groups(rng)
        ours = {r.pair: r.significant for r in S.tukey_hsd(groups)}
        perm = dict(S.permutation_max_q(groups, permutations=1000, seed=i))
        agree += sum(ours[p] == perm[p] for p in ours)
        total += len(ours)
    assert agree / total >= 0.95


def test_null_family_wise_rate():
    rng = np.random.default_rng(0)
    hits = sum(any(r.significant for r in S.tukey_hsd({g: rng.standard_normal(10) for g in range(7)}))
               for _ in range(1000))
    assert hits / 1000 <= 0.07


def test_null_family_wise_rate_is_nominal_at_scale():
    # vectorised replica of the decision rule; 50k nulls pin the rate to about +-0.003
    q = S.studentized_range_q(0.05, 7, 63)
    x = np.random.default_rng(1).standard_normal((50_000, 7, 10))
    m = x.mean(axis=2)
    msw = ((x - m[..., None]) ** 2).sum(axis=(1, 2)) / 63
    rate = np.mean((m.max(axis=1) - m.min(axis=1)) / np.sqrt(msw / 10) > q)
    assert abs(rate - 0.05) < 0.005


def test_error_cases():
    with pytest.raises(S.InsufficientReplicates):
        S.tukey_hsd({1: [0.5], 2: [0.6]})
    with pytest.raises(ValueError, match="unbalanced"):
        S.tukey_hsd({1: [0.5, 0.4], 2: [0.6, 0.7, 0.1]})
    with pytest.raises(ValueError):
        S.tukey_hsd({1: [0.5, 0.4]})


def test_zero_variance_unequal_means_flagged():
    groups = {n: np.full(10, 0.0 if n <= 3 else 1.0) for n in range(1, 8)}
    rows = S.tukey_hsd(groups)
    across = [r for r in rows if (r.pair[0] <= 3) != (r.pair[1] <= 3)]
    within = [r for r in rows if (r.pair[0] <= 3) == (r.pair[1] <= 3)]
    assert all(r.significant and r.flags == ("DegenerateVariance",) and math.isinf(r.q_stat) for r in across)
    assert all(not r.significant and r.flags == () for r in within)


# ---------------------------------------------------------------------------
# discriminability report


def design(rng, families=("MLP", "MicroCNN"), seeds=10):
    cats = ["VarySize", "ConstSize", "ConstArea", "ConstAreaContour", "ConstCirc", "ConstCircContour"]
    return {(f, c): {n: np.clip(rng.normal(n / 7, 0.1, seeds), 0, 1) for n in range(1, 8)}
            for f, c in itertools.product(families, cats)}


def test_bookkeeping_252_24_228():
    rep = S.discriminability_report(design(np.random.default_rng(0)))
    assert (rep.comparisons, rep.excluded, rep.tested) == (252, 24, 228)
    assert rep.tested + rep.excluded == 2 * 6 * math.comb(7, 2)
    assert rep.not_rejected == sum(rep.histogram.values())
    assert (1, 2) not in rep.histogram and (6, 7) not in rep.histogram
    assert len(rep.rows) == 252
    assert sum(r["excluded"] for r in rep.rows) == 24
    assert set(rep.summary()) == {"comparisons", "excluded", "tested", "not_rejected", "not_rejected_pairs"}


def test_perfect_responders_flag_every_tested_pair():
    perfect = {("MLP", "ConstSize"): {n: np.full(10, float(n / 7)) for n in range(1, 8)}}
    rep = S.discriminability_report(perfect)
    tested = [r for r in rep.rows if not r["excluded"]]
    assert len(tested) == 19
    assert all(r["significant"] and r["flags"] == "DegenerateVariance" for r in tested)
    assert rep.not_rejected == 0


def test_insufficient_replicates_propagate():
    with pytest.raises(S.InsufficientReplicates):
        S.discriminability_report(design(np.random.default_rng(0), seeds=1))
