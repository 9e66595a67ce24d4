import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from brainfuse.metrics import (CSV_HEADER, CaseReport, aggregate, dice, evaluate_case, hd95,
                               nearest_rank, read_reports_csv, surface, write_reports_csv,
                               write_reports_json)
from oracles import dice_ref, hausdorff_ref, hd95_ref, random_mask_pair, surface_ref

masks = arrays(bool, (5, 5, 5), elements=st.booleans())


def test_dice_partial_overlap():
    pred = np.zeros((3, 3, 3), bool)
    gt = np.zeros((3, 3, 3), bool)
    pred[0, 0, :2] = True
    gt[0, 0, 0] = True
    assert dice(pred, gt) == pytest.approx(2 / 3, abs=1e-12)
    assert round(dice(pred, gt), 4) == 0.6667


def test_dice_both_empty_is_one():
    z = np.zeros((2, 2, 2), bool)
    assert dice(z, z) == 1.0


def test_hd95_single_voxels_three_apart():
    a = np.zeros((1, 1, 8), bool)
    b = np.zeros((1, 1, 8), bool)
    a[0, 0, 1] = b[0, 0, 4] = True
    assert hd95(a, b) == 3.0


def test_hd95_one_empty_is_undefined_and_both_empty_zero():
    a = np.zeros((4, 4, 4), bool)
    b = a.copy()
    b[1, 1, 1] = True
    assert hd95(a, b) is None
    assert hd95(b, a) is None
    assert hd95(a, a) == 0.0


def test_surface_counts_border_as_background():
    full = np.ones((3, 3, 3), bool)
    s = surface(full)
    assert s.sum() == 26 and not s[1, 1, 1]


def test_nearest_rank_percentile():
    assert nearest_rank(np.arange(1, 21)) == 19
    assert nearest_rank([5.0]) == 5.0


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        dice(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


@settings(max_examples=60, deadline=None)
@given(masks, masks)
def test_dice_matches_oracle(a, b):
    assert dice(a, b) == dice_ref(a, b)


@settings(max_examples=60, deadline=None)
@given(masks)
def test_surface_matches_oracle(a):
    assert sorted(map(tuple, np.argwhere(surface(a)).tolist())) == surface_ref(a)


@settings(max_examples=40, deadline=None)
@given(masks, masks, st.tuples(*[st.floats(0.5, 3.0)] * 3))
def test_hd95_matches_oracle_with_anisotropic_spacing(a, b, spacing):
    got, ref = hd95(a, b, spacing), hd95_ref(a, b, spacing)
    if ref is None:
        assert got is None
    else:
        assert abs(got - ref) <= 1e-9


@settings(max_examples=40, deadline=None)
@given(masks, masks, st.floats(0.25, 4.0))
def test_hd95_scales_linearly_with_spacing(a, b, k):
    base = hd95(a, b)
    scaled = hd95(a, b, (k, k, k))
    if base is None:
        assert scaled is None
    else:
        assert scaled == pytest.approx(k * base, rel=1e-12, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(masks, masks)
def test_hd95_bounded_by_hausdorff(a, b):
    if not a.any() or not b.any():
        return
    h = hausdorff_ref(a, b)
    v = hd95(a, b)
    assert v <= h + 1e-12
    if len(surface_ref(a)) <= 20 and len(surface_ref(b)) <= 20:
        assert v == pytest.approx(h, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(masks, masks)
def test_metrics_symmetric(a, b):
    assert dice(a, b) == dice(b, a)
    assert hd95(a, b) == hd95(b, a)


def test_random_pairs_against_oracle():
    rng = np.random.default_rng(7)
    for _ in range(30):
        a, b = random_mask_pair(rng)
        assert dice(a, b) == dice_ref(a, b)
        ref = hd95_ref(a, b)
        got = hd95(a, b)
        assert (got is None) == (ref is None)
        if ref is not None:
            assert abs(got - ref) <= 1e-9


def _report(case_id, wt, tc=1.0, et=1.0, et_hd=1.0):
    return CaseReport(case_id, {"wt": wt, "tc": tc, "et": et},
                      {"wt": 2.0, "tc": 1.0, "et": et_hd},
                      {"ncr_net": 1.0, "ed": 0.5, "et": et})


def test_aggregate_mean_and_undefined_exclusion():
    agg = aggregate([_report("a", 0.8), _report("b", 0.9, et_hd=None)])
    assert agg.means["wt_dice"] == pytest.approx(0.85)
    assert agg.means["et_hd95"] == 1.0
    assert agg.counts["et_hd95"] == 1 and agg.counts["wt_dice"] == 2
    assert agg.n_cases == 2


def test_aggregate_all_undefined_gives_none():
    agg = aggregate([_report("a", 0.8, et_hd=None)])
    assert agg.means["et_hd95"] is None and agg.counts["et_hd95"] == 0


def test_evaluate_case_perfect_prediction():
    label = np.zeros((8, 8, 8), np.uint8)
    label[2:6, 2:6, 2:6] = 2
    label[3:5, 3:5, 3:5] = 1
    label[3, 3, 3] = 4
    from brainfuse.volume import derive_regions

    probs = derive_regions(label).as_array().astype(np.float32)
    rep = evaluate_case(probs, label, case_id="x")
    assert all(v == 1.0 for v in rep.dice.values())
    assert all(v == 0.0 for v in rep.hd95.values())
    assert all(v == 1.0 for v in rep.tissue_dice.values())


def test_evaluate_case_all_background():
    label = np.zeros((8, 8, 8), np.uint8)
    label[2:6, 2:6, 2:6] = 4
    rep = evaluate_case(np.zeros((3, 8, 8, 8), np.float32), label)
    assert rep.all_background()
    assert rep.dice == {"wt": 0.0, "tc": 0.0, "et": 0.0}


def test_reports_csv_header_and_undefined_empty(tmp_path):
    reports = [_report("a", 0.8, et_hd=None)]
    path = tmp_path / "m.csv"
    write_reports_csv(reports, path)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    assert lines[0] == ("case_id,wt_dice,tc_dice,et_dice,wt_hd95,tc_hd95,et_hd95,"
                        "ncr_net_dice,ed_dice,et_tissue_dice")
    assert lines[1].split(",")[6] == ""
    back = read_reports_csv(path)
    assert back[0]["et_hd95"] is None and back[0]["wt_dice"] == 0.8


def test_reports_json_uses_null(tmp_path):
    reports = [_report("a", 0.8, et_hd=None)]
    path = tmp_path / "m.json"
    write_reports_json(reports, path, aggregate(reports))
    doc = json.loads(path.read_text())
    assert doc["cases"][0]["et_hd95"] is None
    assert "null" in path.read_text()
    assert doc["aggregate"]["counts"]["et_hd95"] == 0
    assert not math.isnan(doc["cases"][0]["wt_dice"])
