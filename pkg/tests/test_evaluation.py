import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multipath.evaluation import IOU_THRESHOLDS, EvalResult, ap_curve, evaluate, in_area_range
from multipath.evaluation_oracle import InstanceTooLarge, oracle_evaluate
from multipath.geometry import Box, iou_matrix
from multipath.inference import Detection
from oracles import random_instance

ONE_GT = {0: (np.array([[0.0, 0.0, 10.0, 10.0]]), np.array([1]))}
IOU60 = {0: [Detection(Box(0, 0, 10, 6), 1, 0.9)]}
METRICS = ("AP", "AP50", "AP75", "AP_small", "AP_medium", "AP_large", "AR1", "AR10", "AR100")


def test_perfect_detection():
    r = evaluate({0: [Detection(Box(0, 0, 10, 10), 1, 0.9)]}, ONE_GT)
    assert r.AP == 100.0 and r.AR1 == 100.0 and r.AP50 == 100.0


def test_iou60_detection():
    r = evaluate(IOU60, ONE_GT)
    assert r.AP == pytest.approx(30.0, abs=1e-9)
    assert r.AP50 == 100.0 and r.AP75 == 0.0


def test_no_detections():
    r = evaluate({}, ONE_GT)
    assert r.AP == 0.0 and r.AR100 == 0.0


def test_size_brackets():
    assert in_area_range(np.array([32.0 ** 2 - 1, 32.0 ** 2]), "small").tolist() == [True, False]
    assert in_area_range(np.array([32.0 ** 2, 96.0 ** 2]), "medium").tolist() == [True, True]
    assert in_area_range(np.array([96.0 ** 2, 96.0 ** 2 + 1]), "large").tolist() == [False, True]
    r = evaluate({0: [Detection(Box(0, 0, 10, 10), 1, 0.9)]}, ONE_GT)
    assert r.AP_small == 100.0
    assert math.isnan(r.AP_medium) and math.isnan(r.AP_large)


def test_unknown_image_rejected():
    with pytest.raises(ValueError):
        evaluate({7: [Detection(Box(0, 0, 1, 1), 1, 0.5)]}, ONE_GT)


def test_ap_curve_examples():
    curve = ap_curve(IOU60, ONE_GT)
    assert curve == {u: (100.0 if u <= 60 else 0.0) for u in IOU_THRESHOLDS}
    assert set(ap_curve({0: [Detection(Box(0, 0, 10, 10), 1, 1.0)]}, ONE_GT).values()) == {100.0}
    assert set(ap_curve({}, ONE_GT).values()) == {0.0}


def test_class_absent_from_truth_is_excluded():
    dets = {0: [Detection(Box(0, 0, 10, 10), 1, 0.9), Detection(Box(50, 50, 60, 60), 2, 0.8)]}
    r = evaluate(dets, ONE_GT)
    assert r.AP == 100.0
    assert list(r.per_class) == [1]


def test_false_positive_ranked_first_halves_precision():
    # FP at score 0.9, TP at 0.8: precision 0.5 at full recall
    dets = {0: [Detection(Box(50, 50, 60, 60), 1, 0.9), Detection(Box(0, 0, 10, 10), 1, 0.8)]}
    assert evaluate(dets, ONE_GT).AP == pytest.approx(50.0)


def test_oracle_examples():
    assert oracle_evaluate({0: [Detection(Box(0, 0, 10, 10), 1, 0.9)]}, ONE_GT).AP == 100.0
    assert oracle_evaluate(IOU60, ONE_GT).AP == pytest.approx(30.0, abs=1e-9)


def test_oracle_refuses_large_instances():
    many = {0: [Detection(Box(i, 0, i + 5, 5), 1, 0.5) for i in range(21)]}
    with pytest.raises(InstanceTooLarge):
        oracle_evaluate(many, ONE_GT)
    gts = {0: (np.tile([0.0, 0.0, 5.0, 5.0], (11, 1)), np.ones(11, int))}
    with pytest.raises(InstanceTooLarge):
        oracle_evaluate({}, gts)


def test_evaluator_agrees_with_oracle_over_100_seeds():
    worst = 0.0
    for seed in range(100):
        dets, truth = random_instance(seed)
        a, o = evaluate(dets, truth), oracle_evaluate(dets, truth)
        for k in METRICS:
            x, y = getattr(a, k), getattr(o, k)
            assert math.isnan(x) == math.isnan(y), (seed, k)
            if not math.isnan(x):
                worst = max(worst, abs(x - y))
    assert worst <= 0.5


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_ap_non_increasing_in_threshold(seed):
    dets, truth = random_instance(seed)
    curve = list(ap_curve(dets, truth).values())
    assert all(b <= a + 1e-9 for a, b in zip(curve, curve[1:]))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 1.0))
def test_duplicate_cannot_increase_ap(seed, frac):
    dets, truth = random_instance(seed, max_gt=4, max_det=8)
    rng = np.random.default_rng(seed)
    dup_of = {}
    for im, ds in dets.items():
        boxes, classes = truth[im]
        if not len(boxes):
            continue
        # a gt whose exact box is detected is matched at every threshold
        others = iou_matrix(boxes[:1], boxes[1:])[0][classes[1:] == classes[0]]
        if np.all(others < 50):
            ds.append(Detection(Box(*boxes[0]), int(classes[0]), float(rng.random())))
            dup_of[im] = ds[-1]
    base = ap_curve(dets, truth)
    for im, d in dup_of.items():
        low = min(x.score for x in dets[im]) * frac
        dets[im].append(Detection(d.box, d.category, low))
    dup = ap_curve(dets, truth)
    assert all(dup[u] <= base[u] + 1e-9 for u in base)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_invariant_to_detection_order(seed):
    dets, truth = random_instance(seed)
    rng = np.random.default_rng(seed)
    shuffled = {im: [ds[i] for i in rng.permutation(len(ds))] for im, ds in dets.items()}
    a, b = evaluate(dets, truth), evaluate(shuffled, truth)
    for k in METRICS:
        x, y = getattr(a, k), getattr(b, k)
        assert (math.isnan(x) and math.isnan(y)) or x == y


def test_metrics_in_range_and_ap_bounded_by_best_threshold():
    for seed in range(20):
        r = evaluate(*random_instance(seed))
        for k in METRICS:
            v = getattr(r, k)
            assert math.isnan(v) or 0.0 <= v <= 100.0
        assert r.AP <= max(r.per_threshold.values()) + 1e-9


def test_result_files(tmp_path):
    r = evaluate(IOU60, ONE_GT)
    r.save_json(tmp_path / "e.json")
    doc = json.loads((tmp_path / "e.json").read_text())
    assert doc["AP"] == pytest.approx(30.0) and doc["AP_large"] is None
    r.save_threshold_csv(tmp_path / "t.csv")
    lines = (tmp_path / "t.csv").read_text().splitlines()
    assert lines[0] == "iou_threshold,ap" and lines[1] == "50,100.000000" and len(lines) == 11
    assert isinstance(r, EvalResult)
