import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multipath.targets import match_proposals, plan_minibatches, sample_for_head
from oracles import fast_rcnn_labels, random_boxes

THRESHOLDS = (50, 55, 60, 65, 70, 75)


def _labels_from_scene(rng, n_props=80, n_gt=4):
    gts = random_boxes(rng, n_gt)
    jitter = rng.normal(0, 3, (n_props, 4))
    props = gts[rng.integers(0, n_gt, n_props)] + jitter
    props[:, 2:] = np.maximum(props[:, 2:], props[:, :2] + 1)
    return match_proposals(props, gts, rng.integers(1, 4, n_gt), THRESHOLDS)


def test_iou_60_labels():
    lab = match_proposals([[0, 0, 10, 10]], [[0, 0, 10, 6]], [3], THRESHOLDS)
    assert lab.best_iou[0] == pytest.approx(60.0)
    assert lab.labels[0].tolist() == [3, 3, 3, 0, 0, 0]


def test_identical_proposal_is_positive_everywhere():
    lab = match_proposals([[4, 5, 20, 30]], [[4, 5, 20, 30]], [2], THRESHOLDS)
    assert lab.labels[0].tolist() == [2] * 6
    np.testing.assert_array_equal(lab.t_star[0], 0.0)


def test_just_below_threshold_is_background():
    # IoU = 49.9: a 10x10 proposal whose overlap with a 10x4.99 gt is 49.9
    lab = match_proposals([[0, 0, 10, 10]], [[0, 0, 10, 4.99]], [1], THRESHOLDS)
    assert lab.best_iou[0] == pytest.approx(49.9)
    assert lab.labels[0].tolist() == [0] * 6
    assert not lab.has_target()[0]


def test_no_ground_truth():
    lab = match_proposals(random_boxes(np.random.default_rng(0), 5), np.zeros((0, 4)), [], THRESHOLDS)
    assert not np.any(lab.labels)
    assert np.all(lab.best_gt == -1)
    assert not np.any(lab.has_target())


def test_threshold_order_checked():
    with pytest.raises(ValueError):
        match_proposals([[0, 0, 1, 1]], [[0, 0, 1, 1]], [1], (60, 50))


def test_ties_go_to_lowest_gt_index():
    lab = match_proposals([[0, 0, 10, 10]], [[0, 0, 10, 6], [0, 4, 10, 10]], [1, 2], THRESHOLDS)
    assert lab.best_gt[0] == 0 and lab.labels[0, 0] == 1


def test_label_monotonicity_over_1000_scenes():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        lab = _labels_from_scene(rng, n_props=20, n_gt=int(rng.integers(1, 5)))
        pos = lab.labels > 0
        assert np.all(pos[:, 1:] <= pos[:, :-1])
        for j, u in enumerate(THRESHOLDS):
            assert np.array_equal(pos[:, j], lab.best_iou >= u)
        nz = lab.labels[pos.any(axis=1)]
        assert np.all((nz == nz[:, :1]) | (nz == 0))
        assert np.array_equal(lab.has_target(), lab.best_iou >= 50)


def test_single_threshold_reproduces_fast_rcnn_labeling():
    rng = np.random.default_rng(2)
    for _ in range(50):
        gts = random_boxes(rng, 3)
        classes = rng.integers(1, 5, 3)
        props = np.r_[random_boxes(rng, 20), gts + rng.normal(0, 2, (3, 4))]
        props[:, 2:] = np.maximum(props[:, 2:], props[:, :2] + 1)
        lab = match_proposals(props, gts, classes, (50,))
        assert lab.labels[:, 0].tolist() == fast_rcnn_labels(props, gts, classes)


def test_plan_counts():
    lab = _labels_from_scene(np.random.default_rng(3), n_props=200)
    plan = sample_for_head(lab, 50, 64, 0.25, np.random.default_rng(0))
    assert (plan.n_pos, plan.n_neg, len(plan.indices)) == (16, 48, 64)
    assert plan.warning is None


def test_plans_cycle_over_heads():
    lab = _labels_from_scene(np.random.default_rng(4), n_props=200)
    gen = plan_minibatches(lab, THRESHOLDS, 64, 0.25, np.random.default_rng(0))
    assert [next(gen).threshold for _ in range(8)] == [50, 55, 60, 65, 70, 75, 50, 55]


def test_all_background_plan_warns(caplog):
    lab = match_proposals(random_boxes(np.random.default_rng(5), 30), np.zeros((0, 4)), [], THRESHOLDS)
    with caplog.at_level(logging.WARNING, logger="multipath.targets"):
        plan = next(plan_minibatches(lab, THRESHOLDS, 64, 0.25, np.random.default_rng(0)))
    assert plan.n_pos == 0 and plan.n_neg == 64 and len(plan.indices) == 64
    assert plan.warning
    assert any("no positives" in r.message for r in caplog.records)


def test_plan_validation():
    lab = _labels_from_scene(np.random.default_rng(6))
    with pytest.raises(ValueError):
        sample_for_head(lab, 50, 1, 0.25, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_for_head(lab, 50, 64, 1.0, np.random.default_rng(0))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(THRESHOLDS), st.integers(2, 96),
       st.floats(0.05, 0.95))
def test_plan_positives_meet_threshold(seed, u, batch, frac):
    lab = _labels_from_scene(np.random.default_rng(seed))
    plan = sample_for_head(lab, u, batch, frac, np.random.default_rng(seed))
    assert len(plan.indices) == batch
    pos, neg = plan.indices[:plan.n_pos], plan.indices[plan.n_pos:]
    assert np.all(lab.best_iou[pos] >= u)
    if plan.n_neg:
        assert np.all(lab.best_iou[neg] < u)
    if lab.column(u).any() and (lab.column(u) == 0).any():
        assert plan.n_pos == int(np.ceil(frac * batch))
    again = sample_for_head(lab, u, batch, frac, np.random.default_rng(seed))
    assert np.array_equal(plan.indices, again.indices)
