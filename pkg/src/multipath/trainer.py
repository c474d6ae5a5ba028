"""Losses and the SGD training loop.

The classification term is ``-log p_k``; the localization term is smooth-L1
on the regression deltas and only counts for a head whose own label is
foreground. The integral loss averages ``cls + lambda * [k_u >= 1] * loc``
over the thresholds ``u``.

Training trains one classifier head per step, cycling through the
thresholds, so every head sees the configured positive fraction. All
randomness of step ``i`` comes from a generator seeded with ``(seed, i)``,
which makes a resumed run replay the same steps as an unbroken one.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import geometry
from .autograd import Tensor, as_tensor, load_checkpoint, zero_grads
from .autograd import functional as F
from .network import DEFAULT_THRESHOLDS, ModelConfig, MultiPathNet
from .synthdata import Dataset
from .targets import TargetLabels, match_proposals, sample_for_head

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass
class LossConfig:
    lam: float = 1.0
    thresholds: tuple = DEFAULT_THRESHOLDS
    smooth_l1_beta: float = 1.0

    def __post_init__(self):
        self.thresholds = tuple(int(u) for u in self.thresholds)
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise ValueError("thresholds must be strictly increasing")


@dataclass
class TrainConfig:
    iterations: int = 200_000
    images_per_batch: int = 4
    proposals_per_image: int = 64
    lr: float = 1e-3
    lr_drop_at: float = 0.8
    lr_drop_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 0.0
    pos_fraction: float = 0.25
    hflip_augment: bool = True
    include_gt: bool = True
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")

    def lr_at(self, it: int) -> float:
        return self.lr * (self.lr_drop_factor if it >= int(self.lr_drop_at * self.iterations) else 1.0)


class TrainingDiverged(RuntimeError):
    def __init__(self, record: dict):
        super().__init__(f"loss became non-finite at iteration {record.get('iteration')}: {record}")
        self.record = record


# ----------------------------------------------------------------------
# losses

def cls_loss(p, k: int) -> Tensor:
    """``-log p[k]`` with ``p[k]`` clamped at 1e-12."""
    p = as_tensor(p)
    return F.neg(F.log(F.clamp_min(p[int(k)], PROB_FLOOR)))


def loc_loss(t, t_star, beta: float = 1.0) -> Tensor:
    """Sum of smooth-L1 over the four delta components."""
    t = as_tensor(t)
    diff = t - as_tensor(np.asarray(t_star, dtype=t.dtype))
    return F.smooth_l1(diff, beta).sum()


def fast_rcnn_loss(p, k: int, t, t_star, lam: float = 1.0, beta: float = 1.0) -> Tensor:
    """Single-threshold loss: ``cls + lam * [k >= 1] * loc``."""
    loss = cls_loss(p, k)
    if k >= 1:
        loss = loss + lam * loc_loss(t, t_star, beta)
    return loss


def integral_loss(probs: Sequence, t, labels, t_star, cfg: LossConfig) -> Tensor:
    """Integral loss of one proposal.

    Args:
        probs: one probability vector per threshold.
        t: predicted deltas (4,).
        labels: class per threshold (``k_u``).
        t_star: target deltas; may be None only if every label is 0.
    """
    labels = [int(k) for k in labels]
    if len(probs) != len(labels) or len(labels) != len(cfg.thresholds):
        raise ValueError("probs, labels and thresholds must have the same length")
    if t_star is None and any(k >= 1 for k in labels):
        raise ValueError("foreground label without a regression target")
    total = None
    for p, k in zip(probs, labels):
        term = fast_rcnn_loss(p, k, t, t_star, cfg.lam, cfg.smooth_l1_beta)
        total = term if total is None else total + term
    return total * (1.0 / len(labels))


def integral_loss_batch(probs: Sequence[Tensor], deltas: Tensor, labels: np.ndarray,
                        t_star: np.ndarray, cfg: LossConfig,
                        heads: Optional[Sequence[int]] = None):
    """Minibatch mean of the integral loss, restricted to ``heads``.

    Args:
        probs: per threshold, (R, K+1) probability tensors.
        deltas: (R, 4) predicted deltas.
        labels: (R, n) labels per threshold.
        t_star: (R, 4) targets (rows without a target may hold NaN).
        heads: indices of the thresholds to include (all by default).

    Returns:
        ``(loss, cls_value, loc_value)`` where the last two are floats of the
        classification and gated localization parts.
    """
    labels = np.asarray(labels, dtype=np.int64)
    r = labels.shape[0]
    heads = list(range(len(probs))) if heads is None else list(heads)
    gate_any = (labels[:, heads] >= 1).any(axis=1)
    if np.isnan(t_star[gate_any]).any():
        raise ValueError("foreground label without a regression target")
    target = np.where(np.isnan(t_star), 0.0, t_star).astype(deltas.dtype)
    per_row_loc = F.smooth_l1(deltas - target, cfg.smooth_l1_beta).sum(axis=1)   # (R,)
    cls_total = None
    loc_total = None
    for h in heads:
        ce = F.cross_entropy_from_probs(probs[h], labels[:, h], PROB_FLOOR)
        c = ce.sum()
        cls_total = c if cls_total is None else cls_total + c
        gate = (labels[:, h] >= 1).astype(deltas.dtype)
        if gate.any():
            l = (per_row_loc * gate).sum()
            loc_total = l if loc_total is None else loc_total + l
    scale = 1.0 / (len(heads) * r)
    cls_part = cls_total * scale
    loss = cls_part
    loc_val = 0.0
    if loc_total is not None:
        loc_part = loc_total * (cfg.lam * scale)
        loss = loss + loc_part
        loc_val = loc_part.item()
    return loss, cls_part.item(), loc_val


# ----------------------------------------------------------------------
# data

class TrainingSet:
    """Rendered images, ground truth and proposals kept in memory."""

    def __init__(self, dataset: Dataset, proposals: Dict[int, np.ndarray], dtype=np.float32):
        self.dataset = dataset
        self.ids = list(dataset.image_ids)
        self.images = np.stack([dataset.scene_of(i).image for i in self.ids]).astype(dtype)
        self.gt_boxes = [dataset.gt_boxes(i) for i in self.ids]
        self.gt_classes = [dataset.gt_classes(i) for i in self.ids]
        self.proposals = [np.asarray(proposals.get(i, np.zeros((0, 4)))).reshape(-1, 4) for i in self.ids]
        self.width = dataset.scene.image_size

    def __len__(self) -> int:
        return len(self.ids)


def batch_order(n: int, batch: int, it: int, seed: int) -> np.ndarray:
    """Image positions for step ``it``: consecutive slices of per-epoch permutations."""
    out = []
    pos = it * batch
    while len(out) < batch:
        epoch, offset = divmod(pos, n)
        perm = np.random.default_rng([int(seed), int(epoch), 104729]).permutation(n)
        take = min(batch - len(out), n - offset)
        out.extend(perm[offset:offset + take].tolist())
        pos += take
    return np.asarray(out, dtype=np.int64)


# ----------------------------------------------------------------------
# optimizer

class SGD:
    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self, lr: float) -> None:
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad.astype(p.dtype, copy=False)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.velocity[p.name]
            v *= self.momentum
            v += g
            p.data -= lr * v


# ----------------------------------------------------------------------
# loop

@dataclass
class TrainResult:
    model: MultiPathNet
    records: List[dict] = field(default_factory=list)
    warnings: int = 0
    optimizer: Optional["SGD"] = None


LOSS_FIELDS = ("iteration", "head_u", "loss_cls", "loss_loc", "lr")


def train_step_batch(model: MultiPathNet, data: TrainingSet, it: int, tcfg: TrainConfig,
                     lcfg: LossConfig):
    """Assemble the minibatch of step ``it``. Returns (images, proposals, labels, t_star, head, warnings)."""
    rng = np.random.default_rng([int(tcfg.seed), int(it), 15485863])
    thresholds = model.cfg.integral_thresholds
    head = it % len(thresholds)
    u = thresholds[head]
    idx = batch_order(len(data), tcfg.images_per_batch, it, tcfg.seed)
    images, props, labels, tstar = [], [], [], []
    warnings = 0
    for i in idx:
        img = data.images[i]
        gts = data.gt_boxes[i]
        pr = data.proposals[i]
        if tcfg.include_gt and len(gts):
            pr = np.concatenate([pr, gts])
        if tcfg.hflip_augment and rng.random() < 0.5:
            img = img[:, :, ::-1]
            gts = geometry.hflip_array(gts, data.width)
            pr = geometry.hflip_array(pr, data.width)
        tl = match_proposals(pr, gts, data.gt_classes[i], thresholds)
        plan = sample_for_head(tl, u, tcfg.proposals_per_image, tcfg.pos_fraction, rng)
        if plan.warning:
            warnings += 1
        images.append(img)
        props.append(pr[plan.indices])
        labels.append(tl.labels[plan.indices])
        tstar.append(tl.t_star[plan.indices] / np.asarray(model.cfg.delta_std))
    return (np.stack(images), props, np.concatenate(labels), np.concatenate(tstar), head,
            warnings, rng)


def train(model: MultiPathNet, data: TrainingSet, tcfg: TrainConfig,
          lcfg: Optional[LossConfig] = None, start_iteration: int = 0,
          optimizer: Optional[SGD] = None,
          on_record: Optional[Callable[[dict], None]] = None,
          on_checkpoint: Optional[Callable[[int, MultiPathNet, SGD], None]] = None) -> TrainResult:
    """Run SGD from ``start_iteration`` up to ``tcfg.iterations``.

    Raises:
        TrainingDiverged: when the loss becomes NaN or infinite.
    """
    if len(data) == 0:
        raise ValueError("training set is empty")
    lcfg = lcfg or LossConfig(thresholds=model.cfg.integral_thresholds)
    if tuple(lcfg.thresholds) != tuple(model.cfg.integral_thresholds):
        raise ValueError("loss thresholds differ from the model's heads")
    params = model.parameters()
    opt = optimizer or SGD(params, tcfg.momentum, tcfg.weight_decay)
    result = TrainResult(model, optimizer=opt)
    for it in range(start_iteration, tcfg.iterations):
        images, props, labels, tstar, head, warns, rng = train_step_batch(model, data, it, tcfg, lcfg)
        result.warnings += warns
        out = model.forward(images, props, training=True, rng=rng)
        loss, lc, ll = integral_loss_batch(out.probs, out.deltas, labels[out.index],
                                           tstar[out.index], lcfg, heads=[head])
        lr = tcfg.lr_at(it)
        rec = {"iteration": it, "head_u": model.cfg.integral_thresholds[head],
               "loss_cls": lc, "loss_loc": ll, "lr": lr}
        if not (math.isfinite(lc) and math.isfinite(ll)):
            raise TrainingDiverged(rec)
        zero_grads(params)
        loss.backward()
        opt.step(lr)
        result.records.append(rec)
        if on_record:
            on_record(rec)
        if tcfg.log_every and (it + 1) % tcfg.log_every == 0:
            recent = result.records[-tcfg.log_every:]
            log.info("iter %d  cls %.4f  loc %.4f  lr %g", it + 1,
                     np.mean([r["loss_cls"] for r in recent]),
                     np.mean([r["loss_loc"] for r in recent]), lr)
        if on_checkpoint and tcfg.checkpoint_every and (it + 1) % tcfg.checkpoint_every == 0:
            on_checkpoint(it + 1, model, opt)
    return result


# ----------------------------------------------------------------------
# checkpoints with optimizer state

def save_training_checkpoint(path, model: MultiPathNet, opt: SGD, iteration: int,
                             tcfg: TrainConfig) -> None:
    extra = {f"momentum/{k}": v for k, v in opt.velocity.items()}
    model.save(path, meta={"iteration": int(iteration), "train_config": asdict(tcfg)}, extra=extra)


def load_training_checkpoint(path, tcfg: TrainConfig, dtype=np.float32):
    """Return ``(model, optimizer, iteration)`` restored from ``path``."""
    arrays, meta = load_checkpoint(path)
    model = MultiPathNet(ModelConfig.from_dict(meta["model_config"]), dtype=dtype)
    model.load_state_dict(arrays)
    opt = SGD(model.parameters(), tcfg.momentum, tcfg.weight_decay)
    for k in opt.velocity:
        key = f"momentum/{k}"
        if key in arrays:
            opt.velocity[k] = arrays[key].astype(dtype)
    return model, opt, int(meta.get("iteration", 0))


def write_loss_csv(path, records: Sequence[dict], append: bool = False) -> None:
    path = Path(path)
    new = not append or not path.exists()
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOSS_FIELDS, lineterminator="\n")
        if new:
            w.writeheader()
        for r in records:
            w.writerow({k: (repr(float(r[k])) if k in ("loss_cls", "loss_loc", "lr") else r[k])
                        for k in LOSS_FIELDS})
