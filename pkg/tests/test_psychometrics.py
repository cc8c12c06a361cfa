import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats as sps

from numbisect import psychometrics as P
from numbisect.models import build_mlp
from numbisect.stimgen import NUMEROSITIES, StimulusSpec, generate_dataset
from numbisect.tensornet import ShapeMismatch


def synthetic_records(responder, per_n=20, seeds=(0,), train_cat="ConstSize", test_cat="ConstSize",
                      family="MLP", rng=None):
    """Records where ``responder(n, rng)`` returns p_many for one image."""
    rng = rng if rng is not None else np.random.default_rng(0)
    rows = []
    for s in seeds:
        for n in NUMEROSITIES:
            for i in range(per_n):
                p = float(responder(n, rng))
                rows.append({"model": family, "family": family, "seed": s, "train_cat": train_cat,
                             "test_cat": test_cat, "n": n, "index": i, "p_many": p,
                             "label": "many" if p > 0.5 else "few"})
    return pd.DataFrame(rows, columns=P.RECORD_COLUMNS)


def logistic(n, mu=4.0, sigma=0.8):
    return 1 / (1 + np.exp(-(np.asarray(n, dtype=float) - mu) / sigma))


# ---------------------------------------------------------------------------
# records


def test_tie_goes_to_few_and_saturation():
    ds = generate_dataset(StimulusSpec("ConstSize", resolution=16), [1, 7], 1)
    rec = P.records_from_logits(np.array([[0.0, 0.0], [-20.0, 20.0]]), ds)
    assert rec["p_many"].iloc[0] == 0.5 and rec["label"].iloc[0] == "few"
    assert rec["p_many"].iloc[1] > 0.999 and rec["label"].iloc[1] == "many"
    with pytest.raises(ShapeMismatch):
        P.records_from_logits(np.zeros((3, 2)), ds)


def test_classify_batch_gives_one_record_per_image():
    spec = StimulusSpec("ConstSize", resolution=16, seed=4)
    ds = generate_dataset(spec, NUMEROSITIES, 100)
    rec = P.classify_batch(build_mlp(input_resolution=16), ds, seed=2, train_cat="ConstSize")
    assert len(rec) == 700 and list(rec.columns) == P.RECORD_COLUMNS
    assert (rec["label"] == np.where(rec["p_many"] > 0.5, "many", "few")).all()
    assert rec.groupby("n")["index"].max().tolist() == [99] * 7


# ---------------------------------------------------------------------------
# curves and error rates


def test_all_few_and_threshold_responders():
    few = P.psychometric_curve(synthetic_records(lambda n, r: 0.1))
    np.testing.assert_array_equal(few.points, np.zeros(7))
    thresh = P.psychometric_curve(synthetic_records(lambda n, r: 0.9 if n >= 4 else 0.1))
    np.testing.assert_array_equal(thresh.points, [0, 0, 0, 1, 1, 1, 1])
    assert (thresh.ci_low == thresh.points).all() and (thresh.ci_high == thresh.points).all()


def test_coin_responder_points_near_half():
    # per point P(|p_hat - 0.5| < 0.1) at 100 draws is ~0.943 (binomial); over 7 points most land inside
    inside = []
    for seed in range(50):
        rec = synthetic_records(lambda n, r: r.random(), per_n=100, rng=np.random.default_rng(seed))
        pts = P.psychometric_points(rec)
        inside.extend(((pts > 0.4) & (pts < 0.6)).tolist())
    binom_inside = sps.binom.cdf(59, 100, 0.5) - sps.binom.cdf(40, 100, 0.5)
    assert binom_inside == pytest.approx(0.943, abs=0.001)
    assert np.mean(inside) >= 0.9


def test_missing_numerosity():
    rec = synthetic_records(lambda n, r: 0.9)
    with pytest.raises(P.MissingNumerosity):
        P.psychometric_curve(rec[rec["n"] != 4])
    with pytest.raises(P.MissingNumerosity):
        P.anchor_error_rates(rec[rec["n"] > 2])


def test_anchor_error_rates_reference_responders():
    always_few = P.anchor_error_rates(synthetic_records(lambda n, r: 0.0))
    assert (always_few["few_error"], always_few["many_error"], always_few["total_error"]) == (0, 100, 50)
    perfect = P.anchor_error_rates(synthetic_records(lambda n, r: float(n > 4)))
    assert perfect["few_error"] == perfect["many_error"] == perfect["total_error"] == 0


@given(st.lists(st.floats(0, 1), min_size=7, max_size=7), st.integers(0, 2 ** 31))
def test_errors_agree_with_curve_endpoints(probs, seed):
    rec = synthetic_records(lambda n, r: float(r.random() < probs[n - 1]), per_n=13, seeds=(0, 1),
                            rng=np.random.default_rng(seed))
    curve = P.psychometric_curve(rec, resamples=50)
    err = P.anchor_error_rates(rec)
    pts = curve.points
    assert err["few_error"] == pytest.approx((pts[0] + pts[1]) / 2 * 100, abs=1e-12)
    assert err["many_error"] == pytest.approx((1 - (pts[5] + pts[6]) / 2) * 100, abs=1e-12)
    assert ((0 <= pts) & (pts <= 1)).all()
    assert (curve.ci_low <= pts).all() and (pts <= curve.ci_high).all()


# ---------------------------------------------------------------------------
# bootstrap


def test_bootstrap_identical_samples_and_empty():
    assert P.bootstrap_ci(np.ones(30)) == (1.0, 1.0)
    with pytest.raises(P.EmptySample):
        P.bootstrap_ci([])


def test_bootstrap_is_deterministic_per_seed():
    x = np.random.default_rng(0).random(50) < 0.4
    assert P.bootstrap_ci(x, seed=5) == P.bootstrap_ci(x, seed=5)
    assert len({P.bootstrap_ci(x, seed=s) for s in range(10)}) > 1


def test_bootstrap_width_and_coverage():
    rng = np.random.default_rng(2024)
    widths, covered = [], []
    for i in range(1000):
        coin = rng.random(100) < 0.5
        lo, hi = P.bootstrap_ci(coin, seed=i)
        widths.append(hi - lo)
        x = rng.random(100) < 0.3
        lo, hi = P.bootstrap_ci(x, seed=10_000 + i)
        covered.append(lo <= 0.3 <= hi)
    assert np.mean((np.array(widths) > 0.1) & (np.array(widths) < 0.3)) > 0.95
    assert abs(np.mean(covered) - 0.95) <= 0.03


# ---------------------------------------------------------------------------
# logistic fit


def test_logistic_recovers_exact_samples():
    fit = P.fit_logistic(logistic(np.arange(1, 8)))
    assert abs(fit.midpoint - 4) < 0.05 and abs(fit.spread - 0.8) < 0.05
    assert fit.residual < 1e-12


@given(st.floats(2.0, 6.0), st.floats(0.3, 2.0))
def test_logistic_recovers_a_range_of_curves(mu, sigma):
    fit = P.fit_logistic(logistic(np.arange(1, 8), mu, sigma))
    assert abs(fit.midpoint - mu) < 0.05 and abs(fit.spread - sigma) < 0.05


def test_logistic_degenerate_and_step():
    with pytest.raises(P.DegenerateFit):
        P.fit_logistic(np.full(7, 0.5))
    step = P.fit_logistic([0, 0, 0, 1, 1, 1, 1])
    assert 3 < step.midpoint < 5 and abs(step.spread) < 0.1
    falling = P.fit_logistic(logistic(np.arange(1, 8), 4, -0.8))
    assert abs(falling.spread + 0.8) < 0.05


# ---------------------------------------------------------------------------
# shapes


@pytest.mark.parametrize("points,kind", [
    ((0, 0, 0.2, 0.5, 0.8, 1, 1), "sigmoid"),
    ((1, 1, 0.9, 0.6, 0.2, 0, 0), "inverted"),
    ((0.97, 0.95, 0.99, 1, 1, 0.96, 1), "all_or_none_many"),
    ((0.02, 0, 0.1, 0.05, 0, 0, 0.03), "all_or_none_few"),
    ((0.5, 0.45, 0.5, 0.55, 0.5, 0.5, 0.52), "flat"),
])
def test_shape_examples(points, kind):
    assert P.classify_curve_shape(points).kind == kind


def test_flat_residual_flag():
    shape = P.classify_curve_shape((0, 0, 0.9, 0.1, 0.9, 0.2, 0.6))
    assert shape.kind == "flat" and shape.diagnostics["residual"] is True
    assert P.classify_curve_shape((0.4, 0.5, 0.5, 0.5, 0.5, 0.5, 0.6)).diagnostics["residual"] is False


@given(st.lists(st.floats(0, 1), min_size=7, max_size=7))
def test_shape_is_total_and_deterministic(points):
    a = P.classify_curve_shape(points)
    assert a.kind in P.SHAPES
    assert a == P.classify_curve_shape(list(points))


def test_thresholds_are_configurable():
    pts = (0.3, 0.3, 0.4, 0.5, 0.6, 0.7, 0.7)
    assert P.classify_curve_shape(pts).kind == "flat"
    assert P.classify_curve_shape(pts, P.ShapeThresholds(low=0.35, high=0.65)).kind == "sigmoid"


@given(st.lists(st.floats(0, 1), min_size=7, max_size=7),
       st.lists(st.floats(0, 1), min_size=7, max_size=7))
@pytest.mark.filterwarnings("ignore::scipy.stats.ConstantInputWarning")
def test_spearman_matches_scipy(x, y):
    expected = sps.spearmanr(x, y).statistic
    got = P.spearman(x, y)
    if np.isnan(expected):
        assert got == 0.0
    else:
        assert got == pytest.approx(expected, abs=1e-12)


# ---------------------------------------------------------------------------
# transfer grid


def test_transfer_grid_cardinality_and_diagonal():
    cats = ["VarySize", "ConstSize", "ConstArea", "ConstAreaContour", "ConstCirc", "ConstCircContour"]
    rng = np.random.default_rng(1)
    frames = [synthetic_records(lambda n, r: r.random() * n / 7, per_n=6, seeds=(0, 1, 2),
                                train_cat=tr, test_cat=te, rng=rng)
              for tr in cats for te in cats]
    records = pd.concat(frames, ignore_index=True)
    grid = P.transfer_matrix(records, "MLP", cats, cats, resamples=100)
    assert len(grid) == 36
    for cat in cats:
        alone = records[(records["train_cat"] == cat) & (records["test_cat"] == cat)]
        single = P.summarize_cell(alone.reset_index(drop=True), "MLP", cat, cat, resamples=100)
        cell = grid[(cat, cat)]
        assert cell.curve.points.tobytes() == single.curve.points.tobytes()
        assert cell.curve.ci_low.tobytes() == single.curve.ci_low.tobytes()
        assert cell.curve.ci_high.tobytes() == single.curve.ci_high.tobytes()
        assert cell.shape == single.shape and cell.errors == single.errors
        assert len(cell.seed_shapes) == 3


def test_seed_proportions_layout():
    rec = synthetic_records(lambda n, r: float(n > 3), per_n=4, seeds=(2, 0, 1))
    props = P.seed_proportions(rec)
    assert sorted(props) == list(NUMEROSITIES)
    np.testing.assert_array_equal(props[1], [0, 0, 0])
    np.testing.assert_array_equal(props[7], [1, 1, 1])
