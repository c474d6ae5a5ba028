"""Run configuration: one JSON document for every stage of the pipeline.

Three profiles ship with the package. ``desk`` trains one model on one CPU
core in about half an hour. ``smoke`` only checks the plumbing.
``paper-defaults`` records the full-scale training and testing settings for
reference and is not meant to be run here.
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict

from .inference import InferenceOptions
from .network import ModelConfig
from .synthdata import ProposalQuality, SceneConfig
from .trainer import LossConfig, TrainConfig

PROFILES = ("desk", "smoke", "paper-defaults")


@dataclass
class DataConfig:
    train_images: int = 300
    test_images: int = 100
    train_proposals: ProposalQuality = field(
        default_factory=lambda: ProposalQuality(quality=0.5, count=100))
    test_proposals: ProposalQuality = field(
        default_factory=lambda: ProposalQuality(quality=0.5, count=200))

    def __post_init__(self):
        if isinstance(self.train_proposals, dict):
            self.train_proposals = ProposalQuality(**self.train_proposals)
        if isinstance(self.test_proposals, dict):
            self.test_proposals = ProposalQuality(**self.test_proposals)
        if self.train_images < 1 or self.test_images < 1:
            raise ValueError("image counts must be >= 1")


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/desk"
    profile: str = "desk"
    scene: SceneConfig = field(default_factory=SceneConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(trunk_channels=(8, 16, 32), dropout=0.0))
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(iterations=10_000, lr=1e-2))
    inference: InferenceOptions = field(
        default_factory=lambda: InferenceOptions(proposals_per_image=200))

    def __post_init__(self):
        if self.profile not in PROFILES:
            raise ValueError(f"unknown profile {self.profile!r}; choose from {PROFILES}")
        if tuple(self.loss.thresholds) != tuple(self.model.integral_thresholds):
            self.loss = replace(self.loss, thresholds=self.model.integral_thresholds)
        if self.model.num_classes != self.scene.num_classes:
            raise ValueError("model and scene disagree on the number of classes")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed, "out_dir": self.out_dir, "profile": self.profile,
            "scene": self.scene.to_dict(),
            "data": {"train_images": self.data.train_images, "test_images": self.data.test_images,
                     "train_proposals": asdict(self.data.train_proposals),
                     "test_proposals": asdict(self.data.test_proposals)},
            "model": self.model.to_dict(),
            "loss": {**asdict(self.loss), "thresholds": list(self.loss.thresholds)},
            "train": asdict(self.train),
            "inference": asdict(self.inference),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "RunConfig":
        """Build from a (possibly partial) dict layered over its profile."""
        base = profile(d.get("profile", "desk")).to_dict()
        model_over = d.get("model", {})
        if "foveal_factors" in model_over and "skip_wiring" not in model_over:
            # let the wiring follow the new head list
            base["model"]["skip_wiring"] = None
        merged = _merge(base, d)
        unknown = set(merged) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(
                seed=int(merged["seed"]), out_dir=str(merged["out_dir"]), profile=merged["profile"],
                scene=SceneConfig(**merged["scene"]), data=DataConfig(**merged["data"]),
                model=ModelConfig.from_dict(merged["model"]), loss=LossConfig(**merged["loss"]),
                train=TrainConfig(**merged["train"]),
                inference=InferenceOptions(**merged["inference"]))
        except TypeError as exc:
            raise ValueError(f"invalid config: {exc}") from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def profile(name: str) -> RunConfig:
    """A fresh config for one of the named profiles."""
    if name == "desk":
        return RunConfig()
    if name == "smoke":
        # a few minutes end to end on one core; for checking the plumbing only
        return RunConfig(
            out_dir="runs/smoke", profile="smoke",
            model=ModelConfig(trunk_channels=(4, 8, 8), reduce_dim=8, head_hidden_dim=32),
            train=TrainConfig(iterations=200, lr=1e-2),
            data=DataConfig(train_images=20, test_images=10,
                            train_proposals=ProposalQuality(quality=0.5, count=60),
                            test_proposals=ProposalQuality(quality=0.5, count=50)),
            inference=InferenceOptions(proposals_per_image=50),
        )
    if name == "paper-defaults":
        return RunConfig(
            out_dir="runs/paper-defaults", profile="paper-defaults",
            model=ModelConfig(trunk_channels=(64, 128, 256), reduce_dim=256, head_hidden_dim=4096),
            train=TrainConfig(iterations=200_000, lr=1e-3, images_per_batch=4,
                              proposals_per_image=64, weight_decay=0.0, momentum=0.9),
            data=DataConfig(train_proposals=ProposalQuality(quality=1.0, count=1000),
                            test_proposals=ProposalQuality(quality=1.0, count=1000)),
            inference=InferenceOptions(nms_threshold=30.0, max_detections=100,
                                       proposals_per_image=1000),
        )
    raise ValueError(f"unknown profile {name!r}; choose from {PROFILES}")
