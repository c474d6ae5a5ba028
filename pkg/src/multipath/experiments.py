"""Desk-scale studies built on the library.

Each study trains models through :func:`train_cached`, which stores
checkpoints under a content hash of everything that influences training. A
second call with the same settings loads the stored weights instead of
training again; deleting the cache directory forces a fresh run.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import evaluation, inference
from .config import RunConfig
from .network import ModelConfig, MultiPathNet
from .synthdata import Dataset, ProposalQuality, generate_dataset, proposals_for
from .trainer import (LossConfig, TrainConfig, TrainingSet, load_training_checkpoint,
                      save_training_checkpoint, train, write_loss_csv)

log = logging.getLogger(__name__)

TEST_FIRST_ID = 1_000_001
ABLATION_ROWS = (
    (False, False, False),
    (True, False, False),
    (False, True, False),
    (True, True, False),
    (False, True, True),
    (True, True, True),
)


@dataclass
class Prepared:
    train: Dataset
    train_proposals: Dict[int, np.ndarray]
    test: Dataset
    test_proposals: Dict[int, np.ndarray]


def prepare_data(run: RunConfig) -> Prepared:
    """Training and test splits with their proposals.

    Both splits come from the run seed; test image ids start at
    ``TEST_FIRST_ID`` so the two never share a scene.
    """
    tr = generate_dataset(run.scene, run.data.train_images, run.seed, "train", first_id=1)
    te = generate_dataset(run.scene, run.data.test_images, run.seed, "test", first_id=TEST_FIRST_ID)
    return Prepared(tr, proposals_for(tr, run.data.train_proposals, run.seed),
                    te, proposals_for(te, run.data.test_proposals, run.seed + 1))


class TestImages:
    """Rendered test images kept in memory."""

    def __init__(self, dataset: Dataset):
        self.dataset = dataset
        self.images = {i: dataset.scene_of(i).image.astype(np.float32) for i in dataset.image_ids}
        self.truth = evaluation.truth_from_dataset(dataset)


# ----------------------------------------------------------------------
# training with a checkpoint cache

def training_key(run: RunConfig, model_cfg: ModelConfig, tcfg: TrainConfig, init_seed: int) -> str:
    doc = {"scene": run.scene.to_dict(), "seed": run.seed,
           "train_images": run.data.train_images,
           "train_proposals": asdict(run.data.train_proposals),
           "model": model_cfg.to_dict(), "train": asdict(tcfg), "init_seed": init_seed,
           "lam": run.loss.lam, "beta": run.loss.smooth_l1_beta}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def train_cached(run: RunConfig, model_cfg: ModelConfig, data: Prepared,
                 cache_dir: Optional[Path] = None, tcfg: Optional[TrainConfig] = None,
                 init_seed: Optional[int] = None, tag: str = "model",
                 training_set: Optional[TrainingSet] = None) -> MultiPathNet:
    """Train ``model_cfg`` on the run's training split, reusing a cached checkpoint."""
    tcfg = tcfg or run.train
    init_seed = run.seed if init_seed is None else init_seed
    path = None
    if cache_dir is not None:
        cache_dir = Path(cache_dir)
        cache_dir.mkdir(parents=True, exist_ok=True)
        key = training_key(run, model_cfg, tcfg, init_seed)
        path = cache_dir / f"{key}.ckpt"
        if path.exists():
            model, _, it = load_training_checkpoint(path, tcfg)
            if it >= tcfg.iterations:
                log.info("loaded %s from %s", tag, path)
                return model
    model = MultiPathNet(model_cfg, seed=init_seed)
    lcfg = LossConfig(lam=run.loss.lam, thresholds=model_cfg.integral_thresholds,
                      smooth_l1_beta=run.loss.smooth_l1_beta)
    ts = training_set or TrainingSet(data.train, data.train_proposals)
    log.info("training %s for %d iterations", tag, tcfg.iterations)
    result = train(model, ts, tcfg, lcfg)
    if path is not None:
        save_training_checkpoint(path, model, result.optimizer, tcfg.iterations, tcfg)
        write_loss_csv(path.with_suffix(".loss.csv"), result.records)
    return model


# ----------------------------------------------------------------------
# inference over a split

def run_detection(models: Sequence[MultiPathNet], images: TestImages,
                  proposals: Dict[int, np.ndarray], opts: inference.InferenceOptions
                  ) -> Dict[int, evaluation.ImageDetections]:
    out = {}
    for i in images.dataset.image_ids:
        props = np.asarray(proposals.get(i, np.zeros((0, 4)))).reshape(-1, 4)[:opts.proposals_per_image]
        if len(props) == 0:
            out[i] = evaluation.ImageDetections(np.zeros((0, 4)), np.zeros(0), np.zeros(0, np.int64))
            continue
        img = images.images[i]
        sp = inference.score_proposals(img, props, models, opts.hflip, opts.fmp)
        b, s, c = inference.detections_from_scores(sp, opts.nms_threshold, opts.max_detections,
                                                   img.shape[-1], img.shape[-2])
        out[i] = evaluation.ImageDetections(b, s, c)
    return out


def evaluate_models(models: Sequence[MultiPathNet], images: TestImages,
                    proposals: Dict[int, np.ndarray], opts: inference.InferenceOptions
                    ) -> evaluation.EvalResult:
    dets = run_detection(models, images, proposals, opts)
    return evaluation.evaluate(dets, images.truth)


# ----------------------------------------------------------------------
# studies

def integral_trend(run: RunConfig, data: Prepared, images: TestImages,
                   cache_dir: Optional[Path] = None,
                   training_set: Optional[TrainingSet] = None) -> Tuple[List[dict], Dict[str, evaluation.EvalResult]]:
    """AP at each IoU threshold for u=50, u=70 and integral-loss models.

    All three share the run's architecture, seeds and iteration budget.
    Returns CSV-ready rows ``{iou_threshold, series, ap}`` and the full
    metric bundles keyed by series name.
    """
    base = run.model
    variants = {"u50": (50,), "u70": (70,), "integral": base.integral_thresholds}
    rows, results = [], {}
    for name, thresholds in variants.items():
        cfg = replace(base, integral_thresholds=thresholds)
        model = train_cached(run, cfg, data, cache_dir, tag=f"trend-{name}", training_set=training_set)
        res = evaluate_models([model], images, data.test_proposals, run.inference)
        results[name] = res
        for u, ap in res.per_threshold.items():
            rows.append({"iou_threshold": u, "series": name, "ap": ap})
    return rows, results


def proposals_trend(run: RunConfig, model: MultiPathNet, images: TestImages,
                    counts: Sequence[int] = (10, 50, 200, 400),
                    qualities: Sequence[float] = (0.0, 1.0)) -> List[dict]:
    """AP against the number and quality of test proposals for one model.

    For each quality one proposal set of ``max(counts)`` boxes per image is
    drawn and truncated to each count, so smaller sets are prefixes of larger
    ones.
    """
    rows = []
    top = max(counts)
    for q in qualities:
        props = proposals_for(images.dataset, ProposalQuality(quality=q, count=top), run.seed + 2)
        for n in counts:
            opts = replace(run.inference, proposals_per_image=n)
            res = evaluate_models([model], images, props, opts)
            rows.append({"proposals": n, "series": f"quality={q:g}", "ap": res.AP, "ap50": res.AP50})
    return rows


def ablation(run: RunConfig, data: Prepared, images: TestImages,
             cache_dir: Optional[Path] = None,
             training_set: Optional[TrainingSet] = None) -> List[dict]:
    """Six rows over {integral loss, foveal, skip}; skip only with foveal."""
    rows = []
    base = run.model
    for integral, foveal, skip in ABLATION_ROWS:
        thresholds = base.integral_thresholds if integral else (50,)
        switches = ModelConfig.ablation(integral, foveal, skip, integral_thresholds=thresholds)
        cfg = replace(base, foveal_factors=switches.foveal_factors,
                      integral_thresholds=switches.integral_thresholds,
                      skip_wiring=switches.skip_wiring)
        tag = "ablate-" + "".join("1" if f else "0" for f in (integral, foveal, skip))
        model = train_cached(run, cfg, data, cache_dir, tag=tag, training_set=training_set)
        res = evaluate_models([model], images, data.test_proposals, run.inference)
        rows.append({"integral": int(integral), "foveal": int(foveal), "skip": int(skip),
                     "ap50": res.AP50, "ap": res.AP})
    return rows


def enhancements(run: RunConfig, models: Sequence[MultiPathNet], images: TestImages,
                 proposals: Dict[int, np.ndarray]) -> List[dict]:
    """AP with test-time flip, dual-quantization pooling and ensembling.

    ``models[0]`` is the base model; the ensemble row averages all of them.
    Single-model rows for every member are included for comparison.
    """
    rows = []
    base = run.inference
    settings = [("baseline", False, False), ("+hflip", True, False), ("+fmp", False, True),
                ("+hflip+fmp", True, True)]
    for name, hf, fmp in settings:
        res = evaluate_models(models[:1], images, proposals, replace(base, hflip=hf, fmp=fmp))
        rows.append({"setting": name, "ap": res.AP, "ap50": res.AP50})
    for k, m in enumerate(models[1:], start=1):
        res = evaluate_models([m], images, proposals, base)
        rows.append({"setting": f"member{k}", "ap": res.AP, "ap50": res.AP50})
    if len(models) > 1:
        res = evaluate_models(models, images, proposals, base)
        rows.append({"setting": f"ensemble{len(models)}", "ap": res.AP, "ap50": res.AP50})
    return rows


def write_rows(path, rows: Sequence[dict]) -> None:
    """CSV with the keys of the first row as header."""
    if not rows:
        raise ValueError("no rows to write")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.6f}" if isinstance(v, float) and not math.isnan(v) else v)
                        for k, v in r.items()})
