import json
import math

import jsonschema
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from turbotrain.metrics import (
    REPORT_SCHEMA,
    DetectionBox,
    average_precision,
    epa,
    evaluate,
    match_detections,
    nms,
    rotated_iou,
    trajectory_errors,
)
from oracles import brute_ap, mc_iou


def _box(x, y, l=2.0, w=2.0, yaw=0.0, s=1.0):
    return DetectionBox(x, y, l, w, yaw, s)


def test_iou_examples():
    assert rotated_iou(_box(0, 0), _box(0, 0)) == pytest.approx(1.0, abs=1e-12)
    assert rotated_iou(_box(0, 0), _box(10, 0)) == 0.0
    assert rotated_iou(_box(0, 0), _box(1, 0)) == pytest.approx(1 / 3, abs=1e-12)
    assert abs(mc_iou((0, 0, 2, 2, 0), (1, 0, 2, 2, 0), n=1_000_000) - 1 / 3) < 1e-2
    with pytest.raises(ValueError):
        rotated_iou(_box(0, 0, l=0.0), _box(0, 0))


def test_iou_matches_monte_carlo_oracle():
    rng = np.random.default_rng(61)
    for k in range(200):
        a = (0.0, 0.0, rng.uniform(1, 5), rng.uniform(0.5, 3), rng.uniform(-math.pi, math.pi))
        b = (rng.uniform(-3, 3), rng.uniform(-2, 2), rng.uniform(1, 5), rng.uniform(0.5, 3), rng.uniform(-math.pi, math.pi))
        got = rotated_iou(DetectionBox(*a), DetectionBox(*b))
        assert abs(got - mc_iou(a, b, seed=k)) < 1e-2


_boxes = st.tuples(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.5, 5), st.floats(0.5, 5), st.floats(-4, 4))


@settings(max_examples=200, deadline=None)
@given(_boxes, _boxes, st.floats(-math.pi, math.pi), st.floats(-20, 20), st.floats(-20, 20))
def test_iou_symmetric_bounded_rigid_invariant(a, b, th, tx, ty):
    ba, bb = DetectionBox(*a), DetectionBox(*b)
    iou = rotated_iou(ba, bb)
    assert 0.0 <= iou <= 1.0
    assert abs(iou - rotated_iou(bb, ba)) < 1e-9
    c, s = math.cos(th), math.sin(th)

    def move(bx):
        return DetectionBox(c * bx.x - s * bx.y + tx, s * bx.x + c * bx.y + ty, bx.length, bx.width, bx.yaw + th)

    assert abs(iou - rotated_iou(move(ba), move(bb))) < 1e-9


def test_match_examples():
    gt = [_box(0, 0, 4, 2)]
    r = match_detections([_box(0.5, 0, 4, 2)], gt)  # IoU 3.5/4.5 = 0.78
    assert len(r.tp) == 1 and not r.fp and not r.fn
    r = match_detections([_box(2.5, 0, 4, 2)], gt)  # IoU 1.5/6.5
    assert r.fp == [0] and r.fn == [0]
    r = match_detections([_box(0.2, 0, 4, 2, s=0.8), _box(0.1, 0, 4, 2, s=0.9)], gt)
    assert r.tp[0][0] == 1 and r.fp == [0]


def test_nms_suppresses_overlap():
    a, b = _box(0, 0, 4, 2, s=0.9), _box(0.2, 0, 4, 2, s=0.8)
    assert rotated_iou(a, b) > 0.9
    assert nms([b, a]) == [1]
    assert nms([a, _box(10, 0, s=0.5)]) == [0, 1]


def test_ap_examples():
    assert average_precision([0.9], [True], 1) == 1.0
    assert average_precision([], [], 3) == 0.0
    assert average_precision([0.9, 0.8, 0.7], [True, False, True], 2) == pytest.approx(0.5 + 0.5 * 2 / 3, abs=1e-12)
    with pytest.raises(ValueError):
        average_precision([0.5], [True], 0)


def test_ap_matches_brute_force_oracle():
    rng = np.random.default_rng(62)
    for _ in range(100):
        n = int(rng.integers(1, 40))
        scores = rng.uniform(size=n).round(2)  # ties included
        is_tp = rng.uniform(size=n) < 0.5
        n_gt = max(1, int(is_tp.sum()) + int(rng.integers(0, 4)))
        assert abs(average_precision(scores, is_tp, n_gt) - brute_ap(list(scores), list(is_tp), n_gt)) < 1e-9


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 1000), st.booleans()), min_size=1, max_size=30, unique_by=lambda t: t[0]))
def test_ap_invariant_to_monotone_score_transform(rows):
    scores = np.array([r[0] / 1000 for r in rows])
    tp = [r[1] for r in rows]
    n_gt = max(1, sum(tp))
    a = average_precision(scores, tp, n_gt)
    assert abs(a - average_precision(np.log(scores) * 3 + 7, tp, n_gt)) < 1e-12
    assert 0.0 <= a <= 1.0


def test_trajectory_error_examples():
    g = np.array([[0.0, 0.0], [1.0, 0.0]])
    assert trajectory_errors([g], [g]) == (0.0, 0.0, 0.0)
    p = np.array([[0.0, 0.0], [1.0, 1.0]])
    assert trajectory_errors([p], [g]) == (0.5, 1.0, 0.0)
    p2 = np.array([[0.0, 0.0], [1.0, 2.5]])
    assert trajectory_errors([p2], [g])[2] == 1.0
    assert trajectory_errors([], []) == (None, None, None)
    with pytest.raises(ValueError):
        trajectory_errors([np.zeros((3, 2))], [np.zeros((2, 2))])


def test_epa_arithmetic():
    assert epa(6, 2, 8) == 0.625
    assert epa(8, 0, 8) == 1.0
    assert epa(0, 4, 10) == -0.2
    with pytest.raises(ValueError):
        epa(0, 0, 0)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 20), st.integers(0, 20), st.integers(1, 30))
def test_epa_monotone(hits, fp, n_gt):
    assert epa(hits + 1, fp, n_gt) >= epa(hits, fp, n_gt)
    assert epa(hits, fp + 1, n_gt) <= epa(hits, fp, n_gt)


def _fake_scene(rng, sid, n_gt, fut_len=6):
    """Ground truths plus a hand-made predictor whose outcome is known by construction."""
    gts = [_box(10.0 * i, 0.0, 4.0, 2.0) for i in range(n_gt)]
    gfut = [np.column_stack([np.full(fut_len, 10.0 * i), np.arange(fut_len, dtype=float)]) for i in range(n_gt)]
    dets, dfut, expect_hit, expect_fp = [], [], 0, 0
    for i in range(n_gt):
        kind = rng.integers(0, 3)  # 0 hit, 1 matched but far future, 2 missed
        if kind == 2:
            continue
        dets.append(_box(10.0 * i + 0.1, 0.0, 4.0, 2.0, s=float(rng.uniform(0.5, 1.0))))
        shift = 0.5 if kind == 0 else 3.0
        dfut.append(gfut[i] + np.array([shift, 0.0]))
        expect_hit += kind == 0
    for _ in range(int(rng.integers(0, 3))):
        dets.append(_box(-50.0 - 10 * len(dets), 30.0, s=float(rng.uniform(0.1, 1.0))))
        dfut.append(np.zeros((fut_len, 2)))
        expect_fp += 1
    return (sid, dets, dfut, gts, gfut), expect_hit, expect_fp


def test_evaluate_against_constructed_outcomes():
    rng = np.random.default_rng(63)
    rows, hits, fps, n_gt = [], 0, 0, 0
    for k in range(10):
        row, h, f = _fake_scene(rng, f"s{k}", int(rng.integers(1, 5)))
        rows.append(row)
        hits, fps, n_gt = hits + h, fps + f, n_gt + len(row[3])
    rep = evaluate(rows)
    assert rep.n_hit == hits and rep.n_fp == fps and rep.n_gt == n_gt
    assert rep.epa == (hits - 0.5 * fps) / n_gt
    assert rep.n_hit <= rep.n_tp <= min(rep.n_det, rep.n_gt)
    assert rep.n_tp + rep.n_fn == rep.n_gt
    jsonschema.validate(json.loads(rep.to_json()), REPORT_SCHEMA)


def test_report_without_matches_has_absent_trajectory_metrics():
    rep = evaluate([("s", [], [], [_box(0, 0)], [np.zeros((6, 2))])])
    assert rep.ade is None and rep.fde is None and rep.mr is None
    assert rep.ap == 0.0 and rep.epa == 0.0
    jsonschema.validate(json.loads(rep.to_json()), REPORT_SCHEMA)
    assert rep.csv_row()["ade"] == ""
