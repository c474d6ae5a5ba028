from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Tuple

from .roi import QUANTIZATION_MODES

STAGE_STRIDES = (4, 8, 16)
DEFAULT_FOVEAL = (1.0, 1.5, 2.0, 4.0)
DEFAULT_THRESHOLDS = (50, 55, 60, 65, 70, 75)


class ConfigError(ValueError):
    pass


def default_wiring(factors: Sequence[float]) -> Tuple[Tuple[int, ...], ...]:
    """conv3-analog (stride 4) feeds only the 1x head; stride 8 feeds heads up to 2x."""
    wiring = []
    for f in factors:
        if f <= 1.0:
            wiring.append((4, 8, 16))
        elif f <= 2.0:
            wiring.append((8, 16))
        else:
            wiring.append((16,))
    return tuple(wiring)


@dataclass
class ModelConfig:
    """Architecture of a MultiPath classifier.

    ``skip_wiring`` lists, per foveal head, the trunk strides whose pooled
    features feed that head; ``None`` selects the default sparse wiring.
    """

    num_classes: int = 4
    in_channels: int = 3
    foveal_factors: Tuple[float, ...] = DEFAULT_FOVEAL
    integral_thresholds: Tuple[int, ...] = DEFAULT_THRESHOLDS
    pool_size: int = 7
    trunk_channels: Tuple[int, int, int] = (16, 32, 64)
    reduce_dim: int = 16
    head_hidden_dim: int = 64
    skip_wiring: Optional[Tuple[Tuple[int, ...], ...]] = None
    quantization: str = "floor_ceil"
    dropout: float = 0.5
    norm_eps: float = 1e-6
    # the regressor predicts deltas divided by these scales
    delta_std: Tuple[float, float, float, float] = (0.1, 0.1, 0.2, 0.2)

    def __post_init__(self):
        self.foveal_factors = tuple(float(f) for f in self.foveal_factors)
        self.integral_thresholds = tuple(int(u) for u in self.integral_thresholds)
        self.trunk_channels = tuple(int(c) for c in self.trunk_channels)
        self.delta_std = tuple(float(v) for v in self.delta_std)
        if self.skip_wiring is None:
            self.skip_wiring = default_wiring(self.foveal_factors)
        self.skip_wiring = tuple(tuple(sorted(int(s) for s in w)) for w in self.skip_wiring)
        self.validate()

    def validate(self) -> None:
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        f = self.foveal_factors
        if not f or f[0] != 1.0 or any(b <= a for a, b in zip(f, f[1:])):
            raise ConfigError(f"foveal_factors must be ascending and start at 1: {f}")
        u = self.integral_thresholds
        if not u or any(b <= a for a, b in zip(u, u[1:])) or u[0] < 50 or u[-1] > 95:
            raise ConfigError(f"integral_thresholds must increase within [50, 95]: {u}")
        if len(self.trunk_channels) != 3:
            raise ConfigError("trunk_channels needs three stages")
        if len(self.skip_wiring) != len(f):
            raise ConfigError("skip_wiring needs one entry per foveal head")
        for w in self.skip_wiring:
            if not w or any(s not in STAGE_STRIDES for s in w):
                raise ConfigError(f"skip_wiring references a missing stage: {w}")
        if self.quantization not in QUANTIZATION_MODES:
            raise ConfigError(f"quantization must be one of {QUANTIZATION_MODES}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if self.pool_size < 1:
            raise ConfigError("pool_size must be >= 1")
        if len(self.delta_std) != 4 or min(self.delta_std) <= 0:
            raise ConfigError("delta_std needs four positive scales")

    @property
    def n_heads(self) -> int:
        return len(self.integral_thresholds)

    @classmethod
    def ablation(cls, integral: bool, foveal: bool, skip: bool, **kw) -> "ModelConfig":
        """Configuration with each modification switched on or off.

        With all three off this is a plain single-region, single-threshold,
        stride-16 classifier.
        """
        factors = DEFAULT_FOVEAL if foveal else (1.0,)
        thresholds = kw.pop("integral_thresholds", DEFAULT_THRESHOLDS if integral else (50,))
        wiring = default_wiring(factors) if skip else tuple((16,) for _ in factors)
        return cls(foveal_factors=factors, integral_thresholds=thresholds,
                   skip_wiring=wiring, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["skip_wiring"] = [list(w) for w in self.skip_wiring]
        for k in ("foveal_factors", "integral_thresholds", "trunk_channels", "delta_std"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))
