import csv
import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from numbisect.stimgen import (ANCHORS, CATEGORIES, NUMEROSITIES, Circle, CircleLayout,
                               PlacementInfeasible, StimulusCategory, StimulusSpec, analytic_totals,
                               export_dataset, generate_dataset, generate_image, image_seed, label_for,
                               layout_violations, measure_features, place_circles, radii_for, rasterize,
                               with_resolution, write_feature_audit)
from oracles import naive_disc, naive_ring

CONST = [StimulusCategory(c) for c in ("ConstSize", "ConstArea", "ConstAreaContour",
                                       "ConstCirc", "ConstCircContour")]


def test_category_names_and_flags():
    assert [c.value for c in CATEGORIES] == ["VarySize", "ConstSize", "ConstArea", "ConstAreaContour",
                                             "ConstCirc", "ConstCircContour"]
    assert StimulusCategory("ConstAreaContour").contour
    assert StimulusCategory("ConstAreaContour").geometry is StimulusCategory.CONST_AREA
    assert not StimulusCategory("ConstSize").contour


def test_labels():
    assert [label_for(n) for n in NUMEROSITIES] == ["few", "few", "unlabeled", "unlabeled",
                                                   "unlabeled", "many", "many"]


@pytest.mark.parametrize("cat", ["ConstArea", "ConstAreaContour"])
def test_const_area_totals_are_exactly_equal(cat):
    spec = StimulusSpec(cat)
    areas = [analytic_totals(spec, n)[0] for n in NUMEROSITIES]
    assert max(areas) / min(areas) == 1
    assert areas[0] == Fraction(20 * 20 * 4)


@pytest.mark.parametrize("cat", ["ConstCirc", "ConstCircContour"])
def test_const_circ_perimeters_are_exactly_equal(cat):
    spec = StimulusSpec(cat)
    perims = [analytic_totals(spec, n)[1] for n in NUMEROSITIES]
    assert max(perims) / min(perims) == 1


def test_const_size_area_scales_with_n_exactly():
    spec = StimulusSpec("ConstSize")
    a1 = analytic_totals(spec, 1)[0]
    assert all(analytic_totals(spec, n)[0] / a1 == n for n in NUMEROSITIES)


@pytest.mark.parametrize("cat", CONST)
@pytest.mark.parametrize("resolution", [64, 224])
def test_generated_layouts_match_exact_totals(cat, resolution):
    spec = StimulusSpec(cat, resolution=resolution, seed=11)
    s = spec.scale
    for n in NUMEROSITIES:
        layout, img = generate_image(spec, n, image_seed(spec.seed, n, 0))
        f = measure_features(layout, img)
        area, perim = analytic_totals(spec, n)
        assert f.analytic_area == pytest.approx(math.pi * float(area) * s * s, rel=1e-12)
        if perim is not None:
            assert f.analytic_perimeter == pytest.approx(2 * math.pi * float(perim) * s, rel=1e-12)


def test_vary_size_radii_come_from_the_set():
    spec = StimulusSpec("VarySize", resolution=112)
    rng = np.random.default_rng(0)
    seen = set()
    for n in NUMEROSITIES:
        for _ in range(20):
            seen.update(radii_for(spec, n, rng))
    assert seen == {5.0, 17.5, 27.5}
    with pytest.raises(ValueError):
        analytic_totals(spec, 3)


@pytest.mark.parametrize("cat", [c.value for c in CATEGORIES])
def test_layouts_have_no_violations(cat):
    spec = StimulusSpec(cat, resolution=64, seed=5)
    ds = generate_dataset(spec, NUMEROSITIES, 20)
    assert all(not layout_violations(lay, spec) for lay in ds.layouts)
    assert ds.counts == {n: 20 for n in NUMEROSITIES}


def test_violation_checker_catches_overlap_and_bounds():
    spec = StimulusSpec("ConstSize", resolution=224)
    bad = CircleLayout((Circle(50, 50, 20), Circle(70, 50, 20)), spec.category, 2)
    assert any("overlap" in v for v in layout_violations(bad, spec))
    edge = CircleLayout((Circle(5, 100, 20),), spec.category, 1)
    assert any("bounds" in v for v in layout_violations(edge, spec))


@given(st.floats(3, 25), st.floats(-0.5, 0.5), st.floats(-0.5, 0.5))
def test_filled_raster_matches_pixel_loop(r, dx, dy):
    res = 64
    layout = CircleLayout((Circle(32 + dx, 32 + dy, r),), StimulusCategory.CONST_SIZE, 1)
    spec = StimulusSpec("ConstSize", resolution=res)
    np.testing.assert_array_equal(rasterize(layout, spec, contour=False), naive_disc(32 + dx, 32 + dy, r, res))


@given(st.floats(4, 25), st.floats(-0.5, 0.5))
def test_contour_raster_matches_pixel_loop(r, dx):
    res = 64
    # a stroke of 2 px at this resolution, i.e. half-width 1
    spec = StimulusSpec("ConstAreaContour", resolution=res, stroke_width=2 * 224 / res)
    layout = CircleLayout((Circle(32 + dx, 31.3, r),), spec.category, 1)
    np.testing.assert_array_equal(rasterize(layout, spec), naive_ring(32 + dx, 31.3, r, 1.0, res))


@given(st.floats(6, 60), st.integers(0, 2**32 - 1))
def test_placed_disc_pixel_count_close_to_area(r, seed):
    spec = StimulusSpec("ConstSize", resolution=224)
    layout = place_circles([r], spec, np.random.default_rng(seed))
    count = rasterize(layout, spec, contour=False).sum()
    assert abs(count - math.pi * r * r) <= 0.03 * math.pi * r * r


def test_same_seed_same_image_and_seed_tree():
    spec = StimulusSpec("ConstCirc", resolution=64, seed=3)
    a = generate_dataset(spec, ANCHORS, 5)
    b = generate_dataset(spec, ANCHORS, 5)
    assert a.content_bytes() == b.content_bytes()
    assert image_seed(3, 2, 4) == image_seed(3, 2, 4) != image_seed(3, 4, 2)
    # images depend only on (dataset seed, n, index), not on which other n are generated
    only_two = generate_dataset(spec, [2], 5)
    np.testing.assert_array_equal(only_two.images, a.images[a.numerosities == 2])


def test_infeasible_placement_names_category_and_n():
    spec = StimulusSpec("ConstSize", resolution=64, const_radius=45, max_attempts=2000)
    with pytest.raises(PlacementInfeasible) as err:
        generate_dataset(spec, [7], 1)
    assert err.value.n == 7
    assert "ConstSize" in str(err.value) and "7 circles" in str(err.value)
    with pytest.raises(PlacementInfeasible):
        place_circles([200.0, 200.0], StimulusSpec("ConstSize"), np.random.default_rng(0))


def test_spec_validation():
    with pytest.raises(ValueError):
        StimulusSpec("ConstSize", const_radius=-1)
    with pytest.raises(ValueError):
        StimulusSpec("ConstCirc", const_radius=40)  # n=1 radius 160 exceeds the frame
    with pytest.raises(ValueError):
        StimulusSpec("Triangles")


def test_resolution_scaling():
    spec = StimulusSpec("ConstArea", resolution=224)
    small = with_resolution(spec, 56)
    assert radii_for(small, 4, np.random.default_rng(0))[0] == pytest.approx(20 / 4)
    ds = generate_dataset(small, [1], 2)
    assert ds.images.shape == (2, 56, 56) and set(np.unique(ds.images)) <= {0, 1}


def test_export_writes_pngs_manifest_and_audit(tmp_path):
    spec = StimulusSpec("ConstSize", resolution=32, seed=1)
    ds = generate_dataset(spec, [1, 4], 2)
    manifest = export_dataset(ds, tmp_path / "out", prefix="cs")
    doc = json.loads(manifest.read_text())
    assert len(doc["images"]) == 4
    first = doc["images"][0]
    png = np.array(Image.open(tmp_path / "out" / first["path"]))
    np.testing.assert_array_equal(png // 255, ds.images[0])
    assert first["numerosity"] == 1 and first["label"] == "few"
    write_feature_audit(ds, tmp_path / "features.csv")
    rows = list(csv.DictReader(open(tmp_path / "features.csv")))
    assert [int(r["n"]) for r in rows] == [1, 1, 4, 4]
    assert int(rows[0]["white_pixel_count"]) == int(ds.images[0].sum())
