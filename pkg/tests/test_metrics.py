import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from backbone_lens._fmt import fmt_pct
from backbone_lens.metrics import (
    DetBox,
    GtBox,
    ap,
    confusion_matrix,
    eval_report,
    f1,
    iou,
    match_detections,
    mean_ap,
    pr_curve,
    precision,
    raw_pr_points,
    read_detections_csv,
    read_ground_truth_csv,
    recall,
)

from helpers import brute_ap, random_detection_fixture

SQ = (0.0, 0.0, 10.0, 10.0)


def det(cls, score, box=SQ, image="i"):
    return DetBox(image, cls, score, box)


def gt(cls, box=SQ, image="i"):
    return GtBox(image, cls, box)


# -- iou -------------------------------------------------------------------------


def test_iou_examples():
    assert iou(SQ, SQ) == 1.0
    assert iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert iou((0, 0, 1, 1), (0.5, 0, 1.5, 1)) == pytest.approx(1 / 3, abs=1e-15)
    assert iou((0, 0, 1, 1), (1, 0, 2, 1)) == 0.0


def test_iou_degenerate():
    with pytest.raises(ValueError, match="degenerate"):
        iou((0, 0, 0, 1), SQ)


def test_box_validation():
    with pytest.raises(ValueError):
        DetBox("i", 0, 1.5, SQ)
    with pytest.raises(ValueError):
        GtBox("i", -1, SQ)
    with pytest.raises(ValueError):
        DetBox("i", 0, 0.5, (5, 5, 1, 9))


# -- matching ----------------------------------------------------------------------


def test_match_single_hit():
    m = match_detections([det(0, 0.9)], [gt(0)])[0]
    assert (m.n_tp, len(m.tp) - m.n_tp, m.fn) == (1, 0, 0)


def test_match_duplicate_is_fp():
    m = match_detections([det(0, 0.6, (1, 0, 11, 10)), det(0, 0.9)], [gt(0)])[0]
    assert m.scores == (0.9, 0.6)
    assert m.tp == (True, False)


def test_match_wrong_class():
    out = match_detections([det(3, 0.9)], [gt(5)])
    assert out[3].tp == (False,) and out[3].n_gt == 0
    assert out[5].fn == 1 and out[5].tp == ()


def test_match_takes_best_unmatched_gt():
    gts = [gt(0, (0, 0, 10, 10)), gt(0, (2, 0, 12, 10))]
    dets = [det(0, 0.9, (1, 0, 11, 10)), det(0, 0.8, (0, 0, 10, 10))]
    m = match_detections(dets, gts)[0]
    assert m.tp == (True, True)


def test_match_respects_images():
    m = match_detections([det(0, 0.9, image="a")], [gt(0, image="b")])[0]
    assert m.tp == (False,) and m.fn == 1


# -- P / R / F1 -----------------------------------------------------------------------


def test_precision_recall_examples():
    assert precision(10, 0) == 1.0
    assert precision(0, 0) == 0.0
    assert precision(1, 3) == 0.25
    assert recall(5, 0) == 1.0
    assert recall(0, 5) == 0.0
    assert recall(3, 1) == 0.75
    assert f1(0.0, 0.0) == 0.0


@pytest.mark.parametrize(
    "p, r, printed",
    [(40.6, 30.8, "35.0"), (41.6, 31.0, "35.5"), (63.8, 73.6, "68.3")],
)
def test_f1_printed_rows(p, r, printed):
    # the printed F1 column is consistent with truncation to one decimal
    assert fmt_pct(f1(p / 100, r / 100), mode="down") == printed


def test_f1_rounded_three_decimals():
    assert round(f1(0.406, 0.308), 3) == 0.350
    assert round(f1(0.416, 0.310), 3) == 0.355
    assert round(f1(0.638, 0.736), 3) == 0.684  # 0.68351 before truncation


@given(st.floats(0.001, 1.0), st.floats(0.001, 1.0))
def test_f1_between_p_and_r(p, r):
    v = f1(p, r)
    assert min(p, r) - 1e-12 <= v <= max(p, r) + 1e-12


# -- PR curve / AP ----------------------------------------------------------------------


def test_pr_curve_examples():
    assert pr_curve([0.9], [True], 1) == [(1.0, 1.0)]
    assert raw_pr_points([0.9, 0.5], [True, False], 1) == [(1.0, 1.0), (1.0, 0.5)]
    assert pr_curve([0.9, 0.5], [True, False], 1) == [(1.0, 1.0), (1.0, 1.0)]
    curve = pr_curve([0.9, 0.5], [False, True], 1)
    assert curve[-1] == (1.0, 0.5)


def test_ap_examples():
    assert ap(pr_curve([0.9], [True], 1)) == 1.0
    assert ap(pr_curve([0.9, 0.5], [False, True], 1)) == 0.5
    assert ap([]) == 0.0


def test_tied_scores_form_one_threshold():
    # with a tie the order inside the group must not matter
    a = ap(pr_curve([0.5, 0.5], [True, False], 1))
    b = ap(pr_curve([0.5, 0.5], [False, True], 1))
    assert a == b == 0.5


def test_ap_matches_threshold_enumeration():
    rng = random.Random(11)
    for _ in range(100):
        dets, gts, n_cls = random_detection_fixture(rng)
        matches = match_detections(dets, gts)
        for c in range(n_cls):
            m = matches.get(c)
            got = ap(pr_curve(m.scores, m.tp, m.n_gt)) if m else 0.0
            assert got == pytest.approx(brute_ap(dets, gts, c), abs=1e-9)


def test_mean_ap_examples():
    aps = [31.3, 25.5, 6.8, 74.0, 36.2, 23.9, 19.5, 11.0, 44.2, 34.1]
    assert mean_ap(aps) == pytest.approx(30.65, abs=1e-9)
    assert mean_ap([0.4]) == 0.4
    assert mean_ap([0.0, 0.0]) == 0.0
    with pytest.raises(ValueError):
        mean_ap([])


# -- confusion matrix ------------------------------------------------------------------


def test_confusion_examples():
    cm = confusion_matrix([det(1, 0.9)], [gt(1)], 3)
    expected = np.zeros((4, 4), dtype=int)
    expected[1, 1] = 1
    np.testing.assert_array_equal(cm, expected)

    cm = confusion_matrix([], [gt(2)], 3)
    assert cm[2, 3] == 1 and cm.sum() == 1

    cm = confusion_matrix([det(0, 0.9)], [gt(2)], 3)
    assert cm[2, 0] == 1 and cm.sum() == 1


def test_confusion_drops_low_confidence():
    cm = confusion_matrix([det(0, 0.1)], [gt(0)], 1)
    np.testing.assert_array_equal(cm, [[0, 1], [0, 0]])


def test_confusion_out_of_range():
    with pytest.raises(ValueError, match="out of range"):
        confusion_matrix([det(3, 0.9)], [], 3)


def test_confusion_marginals_random():
    rng = random.Random(5)
    for _ in range(100):
        dets, gts, n_cls = random_detection_fixture(rng)
        cm = confusion_matrix(dets, gts, n_cls)
        for c in range(n_cls):
            assert cm[c].sum() == sum(1 for g in gts if g.class_id == c)
        assert cm[n_cls, n_cls] == 0


# -- eval_report --------------------------------------------------------------------------


def test_empty_report():
    r = eval_report([], [], ["a", "b"])
    assert r.precision == r.recall == r.f1 == r.map == 0.0
    assert all(c.precision == c.recall == c.f1 == c.ap == 0.0 for c in r.classes)
    assert r.classes[0].notes == ["no predictions", "no instances"]


def test_perfect_report():
    rng = random.Random(2)
    _, gts, n = random_detection_fixture(rng, max_gts=5)
    gts = gts or [gt(0)]
    n = max(n, 1)
    dets = [DetBox(g.image_id, g.class_id, 1.0, g.box) for g in gts]
    r = eval_report(dets, gts, [f"c{i}" for i in range(n)])
    assert r.precision == r.recall == r.f1 == r.map == 1.0
    for c in r.classes:
        if c.instances:
            assert c.precision == c.recall == c.f1 == c.ap == 1.0


def test_three_class_fixture_by_hand(eval3):
    dets = read_detections_csv(eval3 / "dets.csv")
    gts = read_ground_truth_csv(eval3 / "gts.csv")
    r = eval_report(dets, gts, ["car", "pedestrian", "truck"])
    car, ped, truck = r.classes
    # car: 0.95 TP, 0.90 FP, 0.80 TP, 0.60 FP, 0.20 TP (below conf)
    assert (car.tp, car.fp, car.fn) == (2, 2, 1)
    assert car.precision == 0.5 and car.recall == pytest.approx(2 / 3)
    assert car.f1 == pytest.approx(4 / 7)
    assert car.ap == pytest.approx(1 / 3 + (1 / 3) * (2 / 3) + (1 / 3) * 0.6)
    # pedestrian: 0.70 TP, 0.50 FP, 0.30 TP
    assert (ped.tp, ped.fp, ped.fn) == (2, 1, 0)
    assert ped.f1 == pytest.approx(0.8)
    assert ped.ap == pytest.approx(0.5 + 0.5 * (2 / 3))
    assert (truck.tp, truck.fp, truck.fn, truck.ap) == (0, 1, 1, 0.0)
    assert (r.tp, r.fp, r.fn) == (4, 4, 2)
    assert r.map == pytest.approx((car.ap + ped.ap) / 3)
    np.testing.assert_array_equal(r.confusion, [[2, 0, 0, 1], [0, 2, 0, 0], [0, 1, 0, 0], [2, 0, 1, 0]])


def _report_numbers(r):
    return (r.precision, r.recall, r.f1, r.map, tuple((c.precision, c.recall, c.f1, c.ap) for c in r.classes))


def test_report_bounds_and_map_definition():
    rng = random.Random(8)
    for _ in range(100):
        dets, gts, n = random_detection_fixture(rng)
        r = eval_report(dets, gts, [str(i) for i in range(n)])
        vals = [r.precision, r.recall, r.f1, r.map] + [v for c in r.classes for v in (c.precision, c.recall, c.f1, c.ap)]
        assert all(0.0 <= v <= 1.0 for v in vals)
        with_gt = [c.ap for c in r.classes if c.instances]
        assert r.map == (pytest.approx(sum(with_gt) / len(with_gt)) if with_gt else 0.0)


def test_zero_iou_false_positive_never_raises_ap():
    rng = random.Random(21)
    for _ in range(100):
        dets, gts, n = random_detection_fixture(rng)
        names = [str(i) for i in range(n)]
        before = eval_report(dets, gts, names)
        extra = DetBox("a", rng.randrange(n), rng.random(), (500.0, 500.0, 510.0, 510.0))
        after = eval_report(dets + [extra], gts, names)
        for b, a in zip(before.classes, after.classes):
            assert a.ap <= b.ap + 1e-12


def test_lower_score_duplicate_of_tp():
    # holds when the duplicate has no second ground truth to take
    rng = random.Random(4)
    checked = 0
    for _ in range(300):
        dets, gts, n = random_detection_fixture(rng)
        matches = match_detections(dets, gts)
        tps = []
        for c, m in matches.items():
            mine = sorted((d for d in dets if d.class_id == c), key=lambda d: (-d.score, d.image_id, d.class_id, d.box))
            tps += [d for d, flag in zip(mine, m.tp) if flag and d.score > 0]
        tps = [
            d for d in tps
            if sum(1 for g in gts if (g.image_id, g.class_id) == (d.image_id, d.class_id) and iou(g.box, d.box) >= 0.5) == 1
        ]
        if not tps:
            continue
        src = rng.choice(tps)
        dup = DetBox(src.image_id, src.class_id, src.score * rng.uniform(0.0, 0.999), src.box)
        names = [str(i) for i in range(n)]
        before, after = eval_report(dets, gts, names), eval_report(dets + [dup], gts, names)
        c = src.class_id
        assert match_detections(dets + [dup], gts)[c].n_tp == matches[c].n_tp
        assert after.classes[c].ap <= before.classes[c].ap + 1e-12
        checked += 1
    assert checked > 50


def test_duplicate_can_take_a_second_overlapping_gt():
    # two ground truths both overlap the detection box at IoU >= 0.5
    gts = [gt(0, (0, 0, 10, 10)), gt(0, (1, 0, 11, 10))]
    one = match_detections([det(0, 0.9)], gts)[0]
    two = match_detections([det(0, 0.9), det(0, 0.4)], gts)[0]
    assert (one.n_tp, two.n_tp) == (1, 2)


def test_map_invariant_under_relabeling():
    rng = random.Random(13)
    for _ in range(50):
        dets, gts, n = random_detection_fixture(rng)
        perm = list(range(n))
        rng.shuffle(perm)
        names = [f"c{i}" for i in range(n)]
        r0 = eval_report(dets, gts, names)
        r1 = eval_report(
            [DetBox(d.image_id, perm[d.class_id], d.score, d.box) for d in dets],
            [GtBox(g.image_id, perm[g.class_id], g.box) for g in gts],
            [names[perm.index(i)] for i in range(n)],
        )
        assert r1.map == pytest.approx(r0.map, abs=1e-12)


def test_report_independent_of_input_order():
    rng = random.Random(17)
    for _ in range(50):
        dets, gts, n = random_detection_fixture(rng)
        names = [str(i) for i in range(n)]
        r0 = eval_report(dets, gts, names)
        d2, g2 = dets[:], gts[:]
        rng.shuffle(d2)
        rng.shuffle(g2)
        r1 = eval_report(d2, g2, names)
        assert _report_numbers(r1) == _report_numbers(r0)
        np.testing.assert_array_equal(r1.confusion, r0.confusion)


@settings(max_examples=60, deadline=None)
@given(st.randoms(use_true_random=False))
def test_ap_oracle_hypothesis(rnd):
    dets, gts, n = random_detection_fixture(rnd)
    r = eval_report(dets, gts, [str(i) for i in range(n)], conf_threshold=0.0)
    for c in r.classes:
        assert c.ap == pytest.approx(brute_ap(dets, gts, c.class_id), abs=1e-9)


# -- CSV input ---------------------------------------------------------------------------


def test_csv_errors_name_line(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("image_id,class_id,score,x1,y1,x2,y2\na,0,0.5,0,0,1,1\na,0,0.5,5,0,1,1\n")
    with pytest.raises(ValueError, match=r"d.csv:3: .*degenerate"):
        read_detections_csv(p)
    p.write_text("image_id,score\n")
    with pytest.raises(ValueError, match=r":1: expected header"):
        read_detections_csv(p)
    g = tmp_path / "g.csv"
    g.write_text("image_id,class_id,x1,y1,x2,y2\na,zero,0,0,1,1\n")
    with pytest.raises(ValueError, match=r"g.csv:2:"):
        read_ground_truth_csv(g)
