"""The MultiPath classifier.

A three-stage convolutional trunk exposes feature maps at strides 4, 8 and
16. For every proposal, each foveal head pools its enlarged region from the
stages it is wired to, L2-normalizes and rescales each pooled block,
concatenates them, reduces with a 1x1 convolution and runs two fully
connected layers. The head outputs are concatenated into one feature vector
that feeds ``n`` softmax classifiers (one per IoU threshold) and a single
class-agnostic box regressor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .. import geometry
from ..autograd import Parameter, Tensor, no_grad
from ..autograd import functional as F
from ..autograd.checkpoint import load_checkpoint, save_checkpoint
from .config import STAGE_STRIDES, ModelConfig
from .roi import roi_pool


@dataclass
class HeadScores:
    """Numpy view of a forward pass.

    Attributes:
        probs: (n_heads, R, K+1) class probabilities, one row per threshold.
        deltas: (R, 4) box regression deltas, rescaled by ``delta_std``.
        boxes: (R, 4) the (clipped) proposals the rows refer to.
        index: (R,) position of each row in the caller's proposal list.
        thresholds: IoU threshold of each head.
    """

    probs: np.ndarray
    deltas: np.ndarray
    boxes: np.ndarray
    index: np.ndarray
    thresholds: tuple

    def __len__(self) -> int:
        return len(self.boxes)

    def averaged(self) -> np.ndarray:
        return average_heads(self.probs)


def average_heads(probs) -> np.ndarray:
    """Mean of the per-threshold probability vectors (first axis)."""
    if isinstance(probs, HeadScores):
        probs = probs.probs
    probs = np.asarray(probs)
    if probs.shape[0] < 1:
        raise ValueError("need at least one head")
    return probs.mean(axis=0)


@dataclass
class ForwardOutput:
    probs: List[Tensor]          # per threshold, (R, K+1)
    deltas: Tensor               # (R, 4) in units of cfg.delta_std
    features: Tensor             # (R, n_foveal * hidden) concatenated head features
    boxes: np.ndarray            # (R, 4) clipped proposals
    batch_index: np.ndarray      # (R,) image of each row
    index: np.ndarray            # (R,) row of each proposal in the caller's concatenated list


def _he(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


class MultiPathNet:
    """Parameters plus forward pass of the MultiPath classifier."""

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        self.params: Dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        c0 = cfg.in_channels
        chans = dict(zip(STAGE_STRIDES, cfg.trunk_channels))
        prev = c0
        for i, s in enumerate(STAGE_STRIDES):
            c = chans[s]
            self._add(f"trunk.conv{i + 1}.weight", _he(rng, (c, prev, 3, 3), prev * 9, dtype))
            self._add(f"trunk.conv{i + 1}.bias", np.zeros(c, dtype))
            prev = c
        p = cfg.pool_size
        gamma0 = np.sqrt(chans[16] * p * p)
        for h, wiring in enumerate(cfg.skip_wiring):
            total = sum(chans[s] for s in wiring)
            for s in wiring:
                self._add(f"head{h}.scale_s{s}", np.full((), gamma0, dtype))
            self._add(f"head{h}.reduce.weight", _he(rng, (cfg.reduce_dim, total, 1, 1), total, dtype))
            self._add(f"head{h}.reduce.bias", np.zeros(cfg.reduce_dim, dtype))
            fin = cfg.reduce_dim * p * p
            self._add(f"head{h}.fc1.weight", _he(rng, (cfg.head_hidden_dim, fin), fin, dtype))
            self._add(f"head{h}.fc1.bias", np.zeros(cfg.head_hidden_dim, dtype))
            hd = cfg.head_hidden_dim
            self._add(f"head{h}.fc2.weight", _he(rng, (hd, hd), hd, dtype))
            self._add(f"head{h}.fc2.bias", np.zeros(hd, dtype))
        feat_dim = len(cfg.foveal_factors) * cfg.head_hidden_dim
        k1 = cfg.num_classes + 1
        for u in cfg.integral_thresholds:
            self._add(f"cls{u}.weight", (rng.standard_normal((k1, feat_dim)) * 0.01).astype(dtype))
            self._add(f"cls{u}.bias", np.zeros(k1, dtype))
        self._add("bbox.weight", (rng.standard_normal((4, feat_dim)) * 0.001).astype(dtype))
        self._add("bbox.bias", np.zeros(4, dtype))

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Parameter(np.array(value, dtype=self.dtype), name=name)

    def parameters(self) -> List[Tensor]:
        return list(self.params.values())

    def head_parameters(self, head: int) -> List[Tensor]:
        return [t for n, t in self.params.items() if n.startswith(f"head{head}.")]

    # ------------------------------------------------------------------
    def trunk(self, images) -> Dict[int, Tensor]:
        """Feature maps keyed by stride (4, 8, 16) for (N, C, H, W) images."""
        x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=self.dtype))
        if x.ndim == 3:
            x = F.reshape(x, (1,) + x.shape)
        _, _, hh, ww = x.shape
        if hh % 16 or ww % 16:
            raise F.ShapeError(f"image size {hh}x{ww} must be divisible by 16")
        P = self.params
        x = F.relu(F.conv2d(x, P["trunk.conv1.weight"], P["trunk.conv1.bias"], stride=2, pad=1))
        s4 = F.max_pool2d(x)
        x = F.relu(F.conv2d(s4, P["trunk.conv2.weight"], P["trunk.conv2.bias"], stride=1, pad=1))
        s8 = F.max_pool2d(x)
        x = F.relu(F.conv2d(s8, P["trunk.conv3.weight"], P["trunk.conv3.bias"], stride=1, pad=1))
        s16 = F.max_pool2d(x)
        return {4: s4, 8: s8, 16: s16}

    def aggregate_skip(self, pyramid: Dict[int, Tensor], regions: np.ndarray,
                       batch_index: np.ndarray, head: int,
                       quantization: Optional[str] = None) -> Tensor:
        """Pool, normalize, concatenate and 1x1-reduce one head's wired stages.

        ``regions`` must already be foveal-expanded and clipped.
        Returns (R, reduce_dim, P, P).
        """
        cfg = self.cfg
        mode = quantization or cfg.quantization
        blocks = []
        for s in cfg.skip_wiring[head]:
            if s not in pyramid:
                raise KeyError(f"stage stride {s} missing from feature pyramid")
            pooled = roi_pool(pyramid[s], regions, batch_index, s, cfg.pool_size, mode)
            blocks.append(F.l2_normalize_scaled(pooled, self.params[f"head{head}.scale_s{s}"],
                                                eps=cfg.norm_eps, batched=True))
        x = blocks[0] if len(blocks) == 1 else F.concat(blocks, axis=1)
        return F.conv2d(x, self.params[f"head{head}.reduce.weight"],
                        self.params[f"head{head}.reduce.bias"])

    def forward(self, images, proposals: Sequence, training: bool = False,
                rng: Optional[np.random.Generator] = None,
                quantization: Optional[str] = None,
                pyramid: Optional[Dict[int, Tensor]] = None) -> ForwardOutput:
        """Score proposals.

        Args:
            images: (N, C, H, W) or (C, H, W) array.
            proposals: one (R_i, 4) box array per image (a bare array is
                accepted for a single image).
            training: enables dropout (needs ``rng``).
            quantization: override the RoI pooling mode.
            pyramid: trunk output for ``images`` if already computed.

        Proposals that do not overlap the image are dropped; ``index`` in the
        result maps rows back to the caller's concatenated proposal order.
        """
        cfg = self.cfg
        images = np.asarray(images, dtype=self.dtype)
        if images.ndim == 3:
            images = images[None]
        if isinstance(proposals, np.ndarray) and proposals.ndim == 2:
            proposals = [proposals]
        if len(proposals) != images.shape[0]:
            raise ValueError("need one proposal array per image")
        _, _, hh, ww = images.shape

        rows, bidx, index = [], [], []
        offset = 0
        for i, props in enumerate(proposals):
            props = np.asarray(props, dtype=np.float64).reshape(-1, 4)
            clipped, ok = geometry.clip_array(props, ww, hh)
            rows.append(clipped[ok])
            bidx.append(np.full(int(ok.sum()), i, dtype=np.int64))
            index.append(offset + np.flatnonzero(ok))
            offset += len(props)
        boxes = np.concatenate(rows) if rows else np.zeros((0, 4))
        bidx = np.concatenate(bidx) if bidx else np.zeros(0, np.int64)
        index = np.concatenate(index) if index else np.zeros(0, np.int64)

        if pyramid is None:
            pyramid = self.trunk(images)
        feats = []
        for h, factor in enumerate(cfg.foveal_factors):
            regions, _ = geometry.clip_array(geometry.foveal_expand_array(boxes, factor), ww, hh)
            x = self.aggregate_skip(pyramid, regions, bidx, h, quantization)
            x = F.flatten(x)
            x = F.relu(F.linear(x, self.params[f"head{h}.fc1.weight"], self.params[f"head{h}.fc1.bias"]))
            x = F.dropout(x, cfg.dropout, rng, training)
            x = F.relu(F.linear(x, self.params[f"head{h}.fc2.weight"], self.params[f"head{h}.fc2.bias"]))
            x = F.dropout(x, cfg.dropout, rng, training)
            feats.append(x)
        feat = feats[0] if len(feats) == 1 else F.concat(feats, axis=1)
        probs = [F.softmax(F.linear(feat, self.params[f"cls{u}.weight"], self.params[f"cls{u}.bias"]))
                 for u in cfg.integral_thresholds]
        deltas = F.linear(feat, self.params["bbox.weight"], self.params["bbox.bias"])
        return ForwardOutput(probs, deltas, feat, boxes, bidx, index)

    def predict(self, image, proposals, quantization: Optional[str] = None,
                pyramid: Optional[Dict[int, Tensor]] = None) -> HeadScores:
        """Inference on one image without recording a graph."""
        with no_grad():
            out = self.forward(image, [np.asarray(proposals, dtype=np.float64).reshape(-1, 4)],
                               quantization=quantization, pyramid=pyramid)
        probs = np.stack([p.data for p in out.probs]).astype(np.float64)
        probs /= probs.sum(axis=-1, keepdims=True)   # float32 softmax sums drift by ~1e-7
        deltas = out.deltas.data.astype(np.float64) * np.asarray(self.cfg.delta_std)
        return HeadScores(probs, deltas, out.boxes, out.index,
                          self.cfg.integral_thresholds)

    # ------------------------------------------------------------------
    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for k, t in self.params.items():
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {t.shape}")
            t.data = arr.astype(self.dtype).copy()

    def save(self, path, meta: Optional[dict] = None, extra: Optional[Dict[str, np.ndarray]] = None) -> None:
        arrays = dict(self.state_dict())
        if extra:
            arrays.update(extra)
        save_checkpoint(path, arrays, {"model_config": self.cfg.to_dict(), **(meta or {})})

    @classmethod
    def load(cls, path, dtype=np.float32) -> "MultiPathNet":
        arrays, meta = load_checkpoint(path)
        model = cls(ModelConfig.from_dict(meta["model_config"]), dtype=dtype)
        model.load_state_dict(arrays)
        return model

    def clone(self) -> "MultiPathNet":
        other = MultiPathNet.__new__(MultiPathNet)
        other.cfg = self.cfg
        other.dtype = self.dtype
        other.params = {k: Parameter(v.data.copy(), name=k) for k, v in self.params.items()}
        return other
