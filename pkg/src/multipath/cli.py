"""``multipath`` command line: gen, train, eval, ablate, trend, plot.

Exit codes: 0 success, 1 invalid input or configuration, 2 file-system
errors, 3 numerical failure (diverged training).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import evaluation, experiments, geometry, inference, plotting, synthdata
from .config import PROFILES, RunConfig, profile
from .network import ConfigError, MultiPathNet
from .trainer import (LossConfig, TrainingDiverged, TrainingSet, load_training_checkpoint,
                      save_training_checkpoint, train, write_loss_csv)

log = logging.getLogger("multipath")

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_INVALID):
        super().__init__(message)
        self.code = code


# ----------------------------------------------------------------------
# config plumbing

def load_run(args) -> RunConfig:
    if args.config:
        run = RunConfig.load(args.config)
    else:
        run = profile(getattr(args, "profile", None) or "desk")
    if args.seed is not None:
        run = replace(run, seed=args.seed, train=replace(run.train, seed=args.seed))
    if args.out:
        run = replace(run, out_dir=args.out)
    if getattr(args, "iters", None) is not None:
        if args.iters < 1:
            raise CliError("--iters must be >= 1")
        run = replace(run, train=replace(run.train, iterations=args.iters))
    return run


def out_dir(run: RunConfig) -> Path:
    p = Path(run.out_dir)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {p}: {exc}", EXIT_IO) from exc
    return p


def data_for(run: RunConfig, out: Path) -> experiments.Prepared:
    """Splits written by ``gen`` into ``out`` if present, else regenerated."""
    files = [out / n for n in ("train.json", "train_proposals.jsonl", "test.json", "test_proposals.jsonl")]
    if all(f.exists() for f in files):
        return experiments.Prepared(synthdata.Dataset.load(files[0]), synthdata.load_proposals(files[1]),
                                    synthdata.Dataset.load(files[2]), synthdata.load_proposals(files[3]))
    return experiments.prepare_data(run)


# ----------------------------------------------------------------------
# commands

def cmd_gen(args) -> int:
    run = load_run(args)
    if args.images is not None:
        if args.images < 1:
            raise CliError("--images must be >= 1")
        run = replace(run, data=replace(run.data, train_images=args.images))
    if args.quality is not None or args.proposals is not None:
        tp = run.data.test_proposals
        tp = synthdata.ProposalQuality(
            quality=tp.quality if args.quality is None else args.quality,
            count=tp.count if args.proposals is None else args.proposals,
            min_jitter=tp.min_jitter, center_sigma=tp.center_sigma, scale_sigma=tp.scale_sigma)
        run = replace(run, data=replace(run.data, test_proposals=tp))
    out = out_dir(run)
    data = experiments.prepare_data(run)
    data.train.save(out / "train.json")
    data.test.save(out / "test.json")
    synthdata.save_proposals(out / "train_proposals.jsonl", data.train_proposals)
    synthdata.save_proposals(out / "test_proposals.jsonl", data.test_proposals)
    run.save(out / "config.json")
    for name, ds, props in (("train", data.train, data.train_proposals),
                            ("test", data.test, data.test_proposals)):
        boxes = np.concatenate([ds.gt_boxes(i) for i in ds.image_ids])
        fr = synthdata.size_fractions(boxes)
        recall = np.mean([synthdata.recall_at(props[i], ds.gt_boxes(i)) for i in ds.image_ids
                          if len(ds.gt_boxes(i))])
        print(f"{name}: images={len(ds)} objects={len(boxes)} "
              f"per_image={len(boxes) / len(ds):.2f} area<16^2={100 * fr['lt16']:.1f}% "
              f"area<32^2={100 * fr['lt32']:.1f}% area>96^2={100 * fr['gt96']:.1f}% "
              f"proposal_recall@50={recall:.1f}%")
    return EXIT_OK


def _truncate_loss_csv(path: Path, before: int) -> None:
    if not path.exists():
        return
    lines = path.read_text().splitlines(keepends=True)
    kept = lines[:1] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) < before]
    path.write_text("".join(kept))


def cmd_train(args) -> int:
    run = load_run(args)
    if args.checkpoint_every is not None:
        run = replace(run, train=replace(run.train, checkpoint_every=args.checkpoint_every))
    out = out_dir(run)
    tcfg = run.train
    data = data_for(run, out)
    ts = TrainingSet(data.train, data.train_proposals)
    loss_csv = out / "loss.csv"
    if args.resume:
        if not Path(args.resume).exists():
            raise CliError(f"checkpoint not found: {args.resume}", EXIT_IO)
        model, opt, start = load_training_checkpoint(args.resume, tcfg)
        if model.cfg.to_dict() != run.model.to_dict():
            raise CliError("checkpoint architecture differs from the configuration")
        _truncate_loss_csv(loss_csv, start)
    else:
        model, opt, start = MultiPathNet(run.model, seed=run.seed), None, 0
        if loss_csv.exists():
            loss_csv.unlink()
    lcfg = LossConfig(lam=run.loss.lam, thresholds=run.model.integral_thresholds,
                      smooth_l1_beta=run.loss.smooth_l1_beta)

    def on_checkpoint(it, m, o):
        save_training_checkpoint(out / f"checkpoint-{it}.ckpt", m, o, it, tcfg)

    pending: List[dict] = []

    def on_record(rec):
        pending.append(rec)
        if len(pending) >= 100:
            write_loss_csv(loss_csv, pending, append=True)
            pending.clear()

    try:
        result = train(model, ts, tcfg, lcfg, start_iteration=start, optimizer=opt,
                       on_record=on_record, on_checkpoint=on_checkpoint)
    except TrainingDiverged as exc:
        write_loss_csv(loss_csv, pending, append=True)
        raise CliError(f"training diverged: {exc.record}", EXIT_NUMERIC) from exc
    write_loss_csv(loss_csv, pending, append=True)
    save_training_checkpoint(out / "model.ckpt", model, result.optimizer, tcfg.iterations, tcfg)
    run.save(out / "config.json")
    if result.records:
        tail = result.records[-min(100, len(result.records)):]
        print(f"trained {tcfg.iterations} iterations; last-100 mean cls={np.mean([r['loss_cls'] for r in tail]):.4f} "
              f"loc={np.mean([r['loss_loc'] for r in tail]):.4f}; empty-head warnings={result.warnings}")
    print(f"wrote {out / 'model.ckpt'} and {loss_csv}")
    return EXIT_OK


def _inference_options(run: RunConfig, args) -> inference.InferenceOptions:
    opts = run.inference
    changes = {}
    if args.hflip:
        changes["hflip"] = True
    if args.fmp:
        changes["fmp"] = True
    if args.nms_threshold is not None:
        changes["nms_threshold"] = args.nms_threshold
    if args.proposals is not None:
        changes["proposals_per_image"] = args.proposals
    return replace(opts, **changes) if changes else opts


def cmd_eval(args) -> int:
    run = load_run(args)
    out = out_dir(run)
    opts = _inference_options(run, args)
    if args.dataset:
        if not Path(args.dataset).exists():
            raise CliError(f"dataset not found: {args.dataset}", EXIT_IO)
        test = synthdata.Dataset.load(args.dataset)
    else:
        test = data_for(run, out).test
    truth = evaluation.truth_from_dataset(test)
    if args.detections:
        if not Path(args.detections).exists():
            raise CliError(f"detections file not found: {args.detections}", EXIT_IO)
        dets = inference.read_detections(args.detections)
    else:
        paths = list(args.checkpoint or []) + list(args.ensemble or [])
        if not paths:
            raise CliError("give --checkpoint, --ensemble or --detections")
        for p in paths:
            if not Path(p).exists():
                raise CliError(f"checkpoint not found: {p}", EXIT_IO)
        models = [MultiPathNet.load(p) for p in paths]
        if len({m.cfg.num_classes for m in models}) != 1:
            raise CliError("ensemble members disagree on the number of classes")
        q = run.data.test_proposals
        if args.quality is not None or args.proposals is not None:
            q = synthdata.ProposalQuality(
                quality=q.quality if args.quality is None else args.quality,
                count=max(q.count, opts.proposals_per_image), min_jitter=q.min_jitter,
                center_sigma=q.center_sigma, scale_sigma=q.scale_sigma)
        props = synthdata.proposals_for(test, q, run.seed + 1)
        images = experiments.TestImages(test)
        arrays = experiments.run_detection(models, images, props, opts)
        dets = {i: [inference.Detection(geometry.Box(*b), int(c), float(s))
                    for b, s, c in zip(a.boxes, a.scores, a.classes)] for i, a in arrays.items()}
        inference.write_detections(out / "detections.jsonl", dets)
    res = evaluation.evaluate(dets, truth)
    res.save_json(out / "eval.json")
    res.save_threshold_csv(out / "ap_by_threshold.csv")
    print(f"AP={res.AP:.2f} AP50={res.AP50:.2f} AP75={res.AP75:.2f} "
          f"APs={res.AP_small:.2f} APm={res.AP_medium:.2f} APl={res.AP_large:.2f} "
          f"AR1={res.AR1:.2f} AR10={res.AR10:.2f} AR100={res.AR100:.2f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    run = load_run(args)
    out = out_dir(run)
    data = data_for(run, out)
    ts = TrainingSet(data.train, data.train_proposals)
    rows = experiments.ablation(run, data, experiments.TestImages(data.test), out / "cache", ts)
    experiments.write_rows(out / "ablation.csv", rows)
    print("integral foveal skip   AP50     AP")
    for r in rows:
        print(f"{'x' if r['integral'] else ' ':>8} {'x' if r['foveal'] else ' ':>6} "
              f"{'x' if r['skip'] else ' ':>4} {r['ap50']:6.2f} {r['ap']:6.2f}")
    return EXIT_OK


def cmd_trend(args) -> int:
    run = load_run(args)
    out = out_dir(run)
    data = data_for(run, out)
    images = experiments.TestImages(data.test)
    ts = TrainingSet(data.train, data.train_proposals)
    if args.kind == "integral":
        rows, results = experiments.integral_trend(run, data, images, out / "cache", ts)
        experiments.write_rows(out / "integral_trend.csv", rows)
        for name, r in results.items():
            print(f"{name:>9}: AP={r.AP:.2f} AP50={r.AP50:.2f} AP70={r.per_threshold.get(70, float('nan')):.2f}")
    else:
        model = experiments.train_cached(run, run.model, data, out / "cache", training_set=ts)
        rows = experiments.proposals_trend(run, model, images)
        experiments.write_rows(out / "proposals_trend.csv", rows)
        for r in rows:
            print(f"{r['series']:>12} n={r['proposals']:<4} AP={r['ap']:.2f} AP50={r['ap50']:.2f}")
    return EXIT_OK


def cmd_plot(args) -> int:
    out = Path(args.out or ".")
    written = []
    for path in args.inputs:
        if not Path(path).exists():
            raise CliError(f"CSV not found: {path}", EXIT_IO)
        written += plotting.plot_csv(path, out)
    for p in written:
        print(p)
    return EXIT_OK


# ----------------------------------------------------------------------
# parser

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="RunConfig JSON file")
    p.add_argument("--profile", choices=PROFILES, help="built-in profile when no --config is given")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")


def _inference_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--hflip", action="store_true", help="average over horizontal flip")
    p.add_argument("--fmp", action="store_true", help="average over both RoI quantization modes")
    p.add_argument("--nms-threshold", type=float, dest="nms_threshold")
    p.add_argument("--proposals", type=int, help="proposals per image")
    p.add_argument("--quality", type=float, help="simulated proposal quality in [0, 1]")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multipath", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate dataset and proposal files")
    _common(p)
    p.add_argument("--images", type=int, help="number of training images")
    p.add_argument("--quality", type=float, help="test proposal quality")
    p.add_argument("--proposals", type=int, help="test proposals per image")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model; writes model.ckpt and loss.csv")
    _common(p)
    p.add_argument("--iters", type=int)
    p.add_argument("--resume", help="training checkpoint to continue from")
    p.add_argument("--checkpoint-every", type=int, dest="checkpoint_every")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="detect and evaluate on the test split")
    _common(p)
    p.add_argument("--checkpoint", nargs="+")
    p.add_argument("--ensemble", nargs="+", help="additional checkpoints to average")
    p.add_argument("--detections", help="evaluate an existing detections JSONL file")
    p.add_argument("--dataset", help="dataset JSON (default: test split of the config)")
    _inference_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate the six-row ablation")
    _common(p)
    p.add_argument("--iters", type=int)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("trend", help="AP vs IoU threshold or vs proposal count")
    _common(p)
    p.add_argument("kind", choices=("integral", "proposals"))
    p.add_argument("--iters", type=int)
    p.set_defaults(func=cmd_trend)

    p = sub.add_parser("plot", help="render CSV files as SVG line charts")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_plot)
    return parser


def _thread_limit():
    n = os.environ.get("MULTIPATH_THREADS")
    if not n:
        return nullcontext()
    try:
        limit = int(n)
    except ValueError:
        raise CliError(f"MULTIPATH_THREADS must be an integer, got {n!r}") from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=max(1, limit))


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, plotting.PlotInputError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (FloatingPointError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
