"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

Criteria 6 to 9 train desk-profile models. Their checkpoints are cached under
``runs/acceptance/cache`` (or ``$MULTIPATH_ACCEPTANCE_DIR/cache``), so only the
first run pays for training. Tables and SVG charts of those studies are
written next to the cache.
"""

import math
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from acceptance_report import report
from gradcases import OP_CASES, full_model_case
from multipath import experiments as E
from multipath import geometry
from multipath.autograd import gradcheck
from multipath.cli import main
from multipath.config import profile
from multipath.evaluation import evaluate
from multipath.evaluation_oracle import oracle_evaluate
from multipath.geometry import Box
from multipath.inference import Detection, nms_arrays
from multipath.plotting import plot_csv
from multipath.targets import match_proposals
from multipath.trainer import LossConfig, TrainingSet, fast_rcnn_loss, integral_loss
from oracles import fast_rcnn_labels, random_boxes, random_instance

ROOT = Path(__file__).resolve().parents[1]
ACC_DIR = Path(os.environ.get("MULTIPATH_ACCEPTANCE_DIR", ROOT / "runs" / "acceptance"))
SIX = (50, 55, 60, 65, 70, 75)


def test_criterion_01_gradient_integrity():
    start = time.perf_counter()
    worst_op, worst_name = 0.0, ""
    for name in sorted(OP_CASES):
        for seed in range(20):
            fn, wrt = OP_CASES[name](np.random.default_rng(seed))
            err = gradcheck(fn, wrt)
            if err > worst_op:
                worst_op, worst_name = err, f"{name}/seed{seed}"
    worst_model = 0.0
    for seed in range(20):
        fn, params = full_model_case(np.random.default_rng(seed))
        worst_model = max(worst_model, gradcheck(fn, params, max_coords=3, rng=np.random.default_rng(seed)))
    elapsed = time.perf_counter() - start
    ok = worst_op < 1e-4 and worst_model < 1e-4 and elapsed < 120
    report(1, "gradient integrity", ok,
           f"{len(OP_CASES)} ops x 20 seeds worst {worst_op:.2e} ({worst_name}); "
           f"full model x 20 seeds worst {worst_model:.2e}; {elapsed:.0f}s")


def test_criterion_02_label_invariants():
    rng = np.random.default_rng(2024)
    monotone_fail = fast_rcnn_fail = 0
    for _ in range(1000):
        n_gt = int(rng.integers(0, 6))
        gts = random_boxes(rng, n_gt)
        classes = rng.integers(1, 5, n_gt)
        near = gts[rng.integers(0, n_gt, 15)] + rng.normal(0, 3, (15, 4)) if n_gt else np.zeros((0, 4))
        props = np.r_[random_boxes(rng, 10), near]
        props[:, 2:] = np.maximum(props[:, 2:], props[:, :2] + 0.5)
        lab = match_proposals(props, gts, classes, SIX)
        pos = lab.labels > 0
        same_class = np.all((lab.labels == lab.labels[:, :1]) | ~pos)
        if not (np.all(pos[:, 1:] <= pos[:, :-1]) and same_class
                and all(np.array_equal(pos[:, j], lab.best_iou >= u) for j, u in enumerate(SIX))):
            monotone_fail += 1
        single = match_proposals(props, gts, classes, (50,))
        if single.labels[:, 0].tolist() != fast_rcnn_labels(props, gts, classes):
            fast_rcnn_fail += 1
    report(2, "label-assignment invariants", monotone_fail == 0 and fast_rcnn_fail == 0,
           f"1000 configurations: monotonicity violations {monotone_fail}, "
           f"Fast R-CNN label mismatches {fast_rcnn_fail}")


def test_criterion_03_evaluator_oracle():
    worst = 0.0
    nan_mismatch = 0
    for seed in range(100):
        dets, truth = random_instance(seed)
        a, o = evaluate(dets, truth), oracle_evaluate(dets, truth)
        for k in ("AP", "AP50", "AP75", "AP_small", "AP_medium", "AP_large", "AR1", "AR10", "AR100"):
            x, y = getattr(a, k), getattr(o, k)
            if math.isnan(x) or math.isnan(y):
                nan_mismatch += math.isnan(x) != math.isnan(y)
            else:
                worst = max(worst, abs(x - y))
    gt = {0: (np.array([[0.0, 0.0, 10.0, 10.0]]), np.array([1]))}
    cases = {100.0: {0: [Detection(Box(0, 0, 10, 10), 1, 0.9)]},
             30.0: {0: [Detection(Box(0, 0, 10, 6), 1, 0.9)]},
             0.0: {}}
    exact = all(round(evaluate(d, gt).AP, 9) == want and round(oracle_evaluate(d, gt).AP, 9) == want
                for want, d in cases.items())
    report(3, "evaluator oracle equivalence", worst <= 0.5 and nan_mismatch == 0 and exact,
           f"100 scenes worst |evaluate - oracle| = {worst:.2e} AP; analytic cases 100/30/0 "
           f"{'match' if exact else 'MISMATCH'}")


def test_criterion_04_single_threshold_reduction():
    rng = np.random.default_rng(4)
    bitwise = formula = 0
    for _ in range(100):
        p = rng.dirichlet(np.ones(5))
        k = int(rng.integers(0, 5))
        t = rng.normal(0, 1, 4)
        ts = rng.normal(0, 1, 4)
        lam = float(rng.uniform(0, 3))
        cfg = LossConfig(lam=lam, thresholds=(50,))
        a = integral_loss([p], t, [k], ts if k else None, cfg).item()
        b = fast_rcnn_loss(p, k, t, ts, lam).item()
        bitwise += np.float64(a).tobytes() == np.float64(b).tobytes()
        d = np.abs(t - ts)
        direct = -math.log(p[k]) + (lam * float(np.where(d < 1, 0.5 * d * d, d - 0.5).sum()) if k else 0.0)
        formula += abs(a - direct) <= 1e-12 * max(1.0, abs(direct))
    report(4, "single-threshold reduction", bitwise == 100 and formula == 100,
           f"bitwise equal to the single-threshold loss on {bitwise}/100 inputs; "
           f"matches the closed form on {formula}/100")


def test_criterion_05_nms_properties():
    rng = np.random.default_rng(5)
    fails = {"subset": 0, "separation": 0, "idempotence": 0}
    for _ in range(1000):
        n = int(rng.integers(0, 30))
        xy = rng.uniform(0, 60, (n, 2))
        boxes = np.c_[xy, xy + rng.uniform(1, 30, (n, 2))]
        scores = np.round(rng.random(n), 2)          # coarse scores force ties
        classes = rng.integers(1, 4, n)
        thr = float(rng.uniform(0, 100))
        keep = nms_arrays(boxes, scores, classes, thr)
        if len(set(keep.tolist())) != len(keep) or not set(keep.tolist()) <= set(range(n)):
            fails["subset"] += 1
        ious = geometry.iou_matrix(boxes[keep], boxes[keep])
        same = classes[keep][:, None] == classes[keep][None, :]
        np.fill_diagonal(same, False)
        if np.any(ious[same] > thr):
            fails["separation"] += 1
        again = keep[nms_arrays(boxes[keep], scores[keep], classes[keep], thr)]
        if not np.array_equal(again, keep):
            fails["idempotence"] += 1
    report(5, "NMS properties", not any(fails.values()),
           "1000 random sets; violations " + ", ".join(f"{k} {v}" for k, v in fails.items()))


# ----------------------------------------------------------------------
# trained-model criteria

@pytest.fixture(scope="module")
def desk():
    run = replace(profile("desk"), out_dir=str(ACC_DIR))
    ACC_DIR.mkdir(parents=True, exist_ok=True)
    data = E.prepare_data(run)
    return {"run": run, "data": data, "images": E.TestImages(data.test),
            "ts": TrainingSet(data.train, data.train_proposals), "cache": ACC_DIR / "cache"}


def _integral_model(desk, init_seed=None):
    return E.train_cached(desk["run"], desk["run"].model, desk["data"], desk["cache"],
                          init_seed=init_seed, tag="integral", training_set=desk["ts"])


def _save_table(rows, name):
    E.write_rows(ACC_DIR / name, rows)
    plot_csv(ACC_DIR / name, ACC_DIR / "plots")


@pytest.mark.slow
def test_criterion_06_integral_trend(desk):
    start = time.perf_counter()
    rows, res = E.integral_trend(desk["run"], desk["data"], desk["images"], desk["cache"], desk["ts"])
    elapsed = time.perf_counter() - start
    _save_table(rows, "integral_trend.csv")
    spread = {k: max(r.per_threshold.values()) - min(r.per_threshold.values()) for k, r in res.items()}
    ap70 = {k: r.per_threshold[70] for k, r in res.items()}
    ap = {k: r.AP for k, r in res.items()}
    checks = {
        "u70 AP70 >= u50 AP70": ap70["u70"] >= ap70["u50"],
        "integral AP >= single AP - 0.5": ap["integral"] >= max(ap["u50"], ap["u70"]) - 0.5,
        "integral curve flatter": spread["integral"] < min(spread["u50"], spread["u70"]),
        "runtime < 2h": elapsed < 7200,
    }
    detail = (f"AP u50 {ap['u50']:.2f} u70 {ap['u70']:.2f} integral {ap['integral']:.2f}; "
              f"AP70 u50 {ap70['u50']:.2f} u70 {ap70['u70']:.2f}; "
              f"max-min u50 {spread['u50']:.2f} u70 {spread['u70']:.2f} integral {spread['integral']:.2f}; "
              f"{elapsed:.0f}s; failed: {[k for k, v in checks.items() if not v] or 'none'}")
    report(6, "integral-loss trend", all(checks.values()), detail)


@pytest.mark.slow
def test_criterion_07_proposals_trend(desk):
    model = _integral_model(desk)
    start = time.perf_counter()
    rows = E.proposals_trend(desk["run"], model, desk["images"])
    elapsed = time.perf_counter() - start
    _save_table(rows, "proposals_trend.csv")
    q1 = [r["ap"] for r in rows if r["series"] == "quality=1"]
    q0 = {r["proposals"]: r["ap"] for r in rows if r["series"] == "quality=0"}
    ap_q1_50 = next(r["ap"] for r in rows if r["series"] == "quality=1" and r["proposals"] == 50)
    non_decreasing = all(b >= a - 0.5 for a, b in zip(q1, q1[1:]))
    checks = {"quality 1 non-decreasing": non_decreasing,
              "AP(q1, 50) >= AP(q0, 400) - 1": ap_q1_50 >= q0[400] - 1.0,
              "runtime < 15 min": elapsed < 900}
    detail = (f"quality 1 AP at 10/50/200/400: {', '.join(f'{v:.2f}' for v in q1)}; "
              f"quality 0 at 400: {q0[400]:.2f}; {elapsed:.0f}s; "
              f"failed: {[k for k, v in checks.items() if not v] or 'none'}")
    report(7, "proposal-count trend", all(checks.values()), detail)


@pytest.mark.slow
def test_criterion_08_ablation_direction(desk):
    rows = E.ablation(desk["run"], desk["data"], desk["images"], desk["cache"], desk["ts"])
    E.write_rows(ACC_DIR / "ablation.csv", rows)
    ap = {(r["integral"], r["foveal"], r["skip"]): r["ap"] for r in rows}
    base = ap[(0, 0, 0)]
    checks = {"all >= none": ap[(1, 1, 1)] >= base,
              "integral only >= none - 0.5": ap[(1, 0, 0)] >= base - 0.5,
              "foveal only >= none - 0.5": ap[(0, 1, 0)] >= base - 0.5}
    detail = ("AP by (I,F,S): " + ", ".join(f"{''.join(map(str, k))} {v:.2f}" for k, v in ap.items())
              + f"; failed: {[k for k, v in checks.items() if not v] or 'none'}")
    report(8, "ablation direction", all(checks.values()), detail)


@pytest.mark.slow
def test_criterion_09_enhancements(desk):
    run = desk["run"]
    models = [_integral_model(desk), _integral_model(desk, init_seed=run.seed + 1)]
    rows = E.enhancements(run, models, desk["images"], desk["data"].test_proposals)
    E.write_rows(ACC_DIR / "enhancements.csv", rows)
    ap = {r["setting"]: r["ap"] for r in rows}
    base = ap["baseline"]
    best_single = max(base, ap["member1"])
    checks = {"+hflip >= base - 0.3": ap["+hflip"] >= base - 0.3,
              "+fmp >= base - 0.3": ap["+fmp"] >= base - 0.3,
              "+hflip+fmp >= base - 0.3": ap["+hflip+fmp"] >= base - 0.3,
              "ensemble >= best single - 0.3": ap["ensemble2"] >= best_single - 0.3}
    detail = (", ".join(f"{k} {v:.2f}" for k, v in ap.items())
              + f"; failed: {[k for k, v in checks.items() if not v] or 'none'}")
    report(9, "test-time enhancements", all(checks.values()), detail)


def test_criterion_10_determinism(tmp_path):
    args = ["--profile", "smoke", "--seed", "11", "--iters", "20"]
    assert main(["train", *args, "--out", str(tmp_path / "t1")]) == 0
    assert main(["train", *args, "--out", str(tmp_path / "t2")]) == 0
    same_loss = (tmp_path / "t1" / "loss.csv").read_bytes() == (tmp_path / "t2" / "loss.csv").read_bytes()
    assert main(["gen", "--seed", "11", "--out", str(tmp_path / "g1")]) == 0
    assert main(["gen", "--seed", "11", "--out", str(tmp_path / "g2")]) == 0
    names = ("train.json", "test.json", "train_proposals.jsonl", "test_proposals.jsonl")
    same_data = all((tmp_path / "g1" / n).read_bytes() == (tmp_path / "g2" / n).read_bytes() for n in names)
    report(10, "determinism", same_loss and same_data,
           f"loss CSVs {'identical' if same_loss else 'DIFFER'}; "
           f"dataset files {'identical' if same_data else 'DIFFER'}")
