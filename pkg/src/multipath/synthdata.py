"""Synthetic detection scenes and simulated proposals.

Scenes are rendered analytically: each object is a filled shape (rectangle,
ellipse, triangle or diamond, one per class) in a class-specific color family,
drawn over a noisy background with gray clutter blobs. Every shape touches
all four sides of its box, so the annotation is the tight box of the
rendered object. Objects drawn later may occlude earlier ones; occluded
objects keep their full box.

Object side lengths follow a piecewise log-uniform law whose default
brackets put 20% of objects under 16 px and 40% under 32 px.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import geometry

SHAPES = ("rectangle", "ellipse", "triangle", "diamond")

# base RGB per class; instances jitter around it
_PALETTE = np.array([
    [0.90, 0.25, 0.20],
    [0.20, 0.75, 0.30],
    [0.25, 0.35, 0.90],
    [0.90, 0.80, 0.20],
    [0.75, 0.30, 0.80],
    [0.20, 0.80, 0.85],
])


@dataclass
class SceneConfig:
    image_size: int = 128
    num_classes: int = 4
    mean_objects: float = 7.0
    # side-length brackets (px) and their probabilities; log-uniform inside each
    size_edges: Tuple[float, ...] = (6.0, 16.0, 32.0, 112.0)
    size_probs: Tuple[float, ...] = (0.2, 0.2, 0.6)
    aspect_sigma: float = 0.25
    clutter_density: float = 6.0
    occlusion_prob: float = 0.3
    noise: float = 0.04
    color_jitter: float = 0.08
    supersample: int = 2
    seed: int = 0

    def __post_init__(self):
        self.size_edges = tuple(float(v) for v in self.size_edges)
        self.size_probs = tuple(float(v) for v in self.size_probs)
        if self.num_classes < 1 or self.num_classes > len(SHAPES):
            raise ValueError(f"num_classes must be in [1, {len(SHAPES)}]")
        if not 0.0 <= self.occlusion_prob <= 1.0:
            raise ValueError("occlusion_prob must be in [0, 1]")
        if len(self.size_probs) != len(self.size_edges) - 1:
            raise ValueError("size_probs needs one entry per size bracket")
        if abs(sum(self.size_probs) - 1.0) > 1e-9 or min(self.size_probs) < 0:
            raise ValueError("size_probs must be a probability vector")
        if self.size_edges[-1] > self.image_size:
            raise ValueError("largest object side exceeds the image")
        if self.mean_objects < 0 or self.clutter_density < 0:
            raise ValueError("counts must be non-negative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["size_edges"] = list(self.size_edges)
        d["size_probs"] = list(self.size_probs)
        return d


@dataclass
class Annotation:
    box: geometry.Box
    category: int       # 1..K


@dataclass
class Scene:
    image: np.ndarray                 # (3, H, W) float in [0, 1]
    annotations: List[Annotation] = field(default_factory=list)

    @property
    def boxes(self) -> np.ndarray:
        return np.array([a.box for a in self.annotations], dtype=np.float64).reshape(-1, 4)

    @property
    def classes(self) -> np.ndarray:
        return np.array([a.category for a in self.annotations], dtype=np.int64)


# ----------------------------------------------------------------------
# rendering

def _coverage(shape: str, box, size: int, ss: int):
    """Fractional pixel coverage of ``shape`` inside ``box`` on the pixel grid it overlaps."""
    x1, y1, x2, y2 = box
    c0, r0 = int(np.floor(x1)), int(np.floor(y1))
    c1, r1 = int(np.ceil(x2)), int(np.ceil(y2))
    c0, r0 = max(c0, 0), max(r0, 0)
    c1, r1 = min(c1, size), min(r1, size)
    offs = (np.arange(ss) + 0.5) / ss
    xs = (np.arange(c0, c1)[:, None] + offs[None, :]).reshape(-1)
    ys = (np.arange(r0, r1)[:, None] + offs[None, :]).reshape(-1)
    # normalized coordinates in [-1, 1] across the box
    u = (xs - 0.5 * (x1 + x2)) / (0.5 * (x2 - x1))
    v = (ys - 0.5 * (y1 + y2)) / (0.5 * (y2 - y1))
    U, V = np.meshgrid(u, v)
    inside_box = (np.abs(U) <= 1) & (np.abs(V) <= 1)
    if shape == "rectangle":
        m = inside_box
    elif shape == "ellipse":
        m = U * U + V * V <= 1
    elif shape == "triangle":
        # apex at top center, base on the bottom edge
        m = inside_box & (np.abs(U) <= (V + 1) / 2)
    elif shape == "diamond":
        m = np.abs(U) + np.abs(V) <= 1
    else:
        raise ValueError(shape)
    cov = m.reshape(r1 - r0, ss, c1 - c0, ss).mean(axis=(1, 3))
    return cov, (r0, r1, c0, c1)


def _sample_side(cfg: SceneConfig, rng: np.random.Generator) -> float:
    k = rng.choice(len(cfg.size_probs), p=cfg.size_probs)
    lo, hi = np.log(cfg.size_edges[k]), np.log(cfg.size_edges[k + 1])
    return float(np.exp(rng.uniform(lo, hi)))


def _place(cfg: SceneConfig, rng, side: float, boxes: List, occlude: bool):
    size = cfg.image_size
    aspect = float(np.exp(rng.normal(0.0, cfg.aspect_sigma)))
    w = min(side * np.sqrt(aspect), size - 1.0)
    h = min(side / np.sqrt(aspect), size - 1.0)
    if occlude and boxes:
        # center the new object near an existing one so the two overlap
        ox1, oy1, ox2, oy2 = boxes[rng.integers(len(boxes))]
        cx = rng.uniform(ox1, ox2)
        cy = rng.uniform(oy1, oy2)
        x1 = float(np.clip(cx - w / 2, 0, size - w))
        y1 = float(np.clip(cy - h / 2, 0, size - h))
    else:
        x1 = float(rng.uniform(0, size - w))
        y1 = float(rng.uniform(0, size - h))
    return geometry.Box(x1, y1, x1 + w, y1 + h)


def generate_scene(cfg: SceneConfig, rng: np.random.Generator) -> Scene:
    """Render one scene; deterministic given the generator state."""
    size = cfg.image_size
    img = np.empty((3, size, size))
    bg = 0.35 + 0.3 * rng.random(3)
    img[:] = bg[:, None, None]
    img += rng.normal(0.0, cfg.noise, img.shape)

    # clutter: small gray blobs that are not objects
    n_clutter = rng.poisson(cfg.clutter_density)
    for _ in range(n_clutter):
        side = float(np.exp(rng.uniform(np.log(3.0), np.log(12.0))))
        x1, y1 = rng.uniform(0, size - side, 2)
        shape = SHAPES[rng.integers(len(SHAPES))]
        cov, (r0, r1, c0, c1) = _coverage(shape, (x1, y1, x1 + side, y1 + side), size, cfg.supersample)
        gray = rng.uniform(0.1, 0.9)
        img[:, r0:r1, c0:c1] = img[:, r0:r1, c0:c1] * (1 - cov) + gray * cov

    n_obj = rng.poisson(cfg.mean_objects)
    anns: List[Annotation] = []
    placed: List[geometry.Box] = []
    for _ in range(n_obj):
        cls = int(rng.integers(cfg.num_classes)) + 1
        side = _sample_side(cfg, rng)
        occlude = rng.random() < cfg.occlusion_prob
        box = _place(cfg, rng, side, placed, occlude)
        color = np.clip(_PALETTE[cls - 1] + rng.normal(0.0, cfg.color_jitter, 3), 0, 1)
        cov, (r0, r1, c0, c1) = _coverage(SHAPES[cls - 1], box, size, cfg.supersample)
        img[:, r0:r1, c0:c1] = img[:, r0:r1, c0:c1] * (1 - cov) + color[:, None, None] * cov
        placed.append(box)
        anns.append(Annotation(box, cls))
    return Scene(np.clip(img, 0.0, 1.0), anns)


def image_rng(dataset_seed: int, image_id: int) -> np.random.Generator:
    return np.random.default_rng([int(dataset_seed), int(image_id)])


def render_image(cfg: SceneConfig, dataset_seed: int, image_id: int) -> Scene:
    return generate_scene(cfg, image_rng(dataset_seed, image_id))


# ----------------------------------------------------------------------
# proposals

@dataclass
class ProposalQuality:
    """Knob for simulated proposal quality.

    ``quality`` 0 gives loose, Selective-Search-like boxes and 1 tight,
    DeepMask-like boxes. ``min_jitter`` is the relative jitter that remains
    at quality 1 (0 reproduces ground truth exactly).
    """

    quality: float = 1.0
    count: int = 100
    min_jitter: float = 0.05
    center_sigma: float = 0.30
    scale_sigma: float = 0.40

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("proposal count must be >= 1")
        if not 0.0 <= self.quality <= 1.0:
            raise ValueError("quality must be in [0, 1]")

    @property
    def object_fraction(self) -> float:
        return 0.3 + 0.5 * self.quality


def simulate_proposals(boxes: np.ndarray, q: ProposalQuality, rng: np.random.Generator,
                       image_size: int, size_cfg: Optional[SceneConfig] = None) -> np.ndarray:
    """Jittered ground-truth boxes mixed with random background boxes.

    Object proposals cycle through the ground truth in a random order, so
    more proposals cover more objects. Relative jitter on the center and on
    log-size shrinks linearly with quality down to ``min_jitter``. The result
    is shuffled, clipped to the image and has exactly ``q.count`` rows.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    size_cfg = size_cfg or SceneConfig(image_size=image_size)
    n_obj = int(round(q.count * q.object_fraction)) if len(boxes) else 0
    rel = (1.0 - q.quality) + q.quality * q.min_jitter
    out = []
    if n_obj:
        order = np.concatenate([rng.permutation(len(boxes))
                                for _ in range(int(np.ceil(n_obj / len(boxes))))])[:n_obj]
        g = boxes[order]
        w = g[:, 2] - g[:, 0]
        h = g[:, 3] - g[:, 1]
        cx = g[:, 0] + 0.5 * w + rng.normal(0, 1, n_obj) * q.center_sigma * rel * w
        cy = g[:, 1] + 0.5 * h + rng.normal(0, 1, n_obj) * q.center_sigma * rel * h
        w2 = w * np.exp(rng.normal(0, 1, n_obj) * q.scale_sigma * rel)
        h2 = h * np.exp(rng.normal(0, 1, n_obj) * q.scale_sigma * rel)
        out.append(np.stack([cx - w2 / 2, cy - h2 / 2, cx + w2 / 2, cy + h2 / 2], axis=1))
    n_bg = q.count - n_obj
    if n_bg:
        sides = np.array([_sample_side(size_cfg, rng) for _ in range(n_bg)])
        asp = np.exp(rng.normal(0, size_cfg.aspect_sigma, n_bg))
        bw = np.minimum(sides * np.sqrt(asp), image_size)
        bh = np.minimum(sides / np.sqrt(asp), image_size)
        x1 = rng.uniform(0, 1, n_bg) * (image_size - bw)
        y1 = rng.uniform(0, 1, n_bg) * (image_size - bh)
        out.append(np.stack([x1, y1, x1 + bw, y1 + bh], axis=1))
    props = np.concatenate(out)[rng.permutation(q.count)]
    clipped, ok = geometry.clip_array(props, image_size, image_size)
    # jitter can push a box fully outside; re-center those inside the image
    if not ok.all():
        bad = ~ok
        w = np.clip(props[bad, 2] - props[bad, 0], 1.0, image_size)
        h = np.clip(props[bad, 3] - props[bad, 1], 1.0, image_size)
        cx = np.clip(0.5 * (props[bad, 0] + props[bad, 2]), w / 2, image_size - w / 2)
        cy = np.clip(0.5 * (props[bad, 1] + props[bad, 3]), h / 2, image_size - h / 2)
        clipped[bad] = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
    return clipped


def recall_at(proposals: np.ndarray, gts: np.ndarray, threshold: float = 50.0) -> float:
    """Fraction (0-100) of ground-truth boxes covered by some proposal at IoU >= threshold."""
    gts = np.asarray(gts).reshape(-1, 4)
    if len(gts) == 0:
        return 100.0
    if len(proposals) == 0:
        return 0.0
    best = geometry.iou_matrix(gts, proposals).max(axis=1)
    return 100.0 * float((best >= threshold).mean())


# ----------------------------------------------------------------------
# dataset files

@dataclass
class Dataset:
    """COCO-like container. Pixels are regenerated from ``(seed, image id)``."""

    scene: SceneConfig
    seed: int
    image_ids: List[int]
    annotations: Dict[int, List[Annotation]]
    split: str = "train"

    def __len__(self) -> int:
        return len(self.image_ids)

    def scene_of(self, image_id: int) -> Scene:
        return render_image(self.scene, self.seed, image_id)

    def gt_boxes(self, image_id: int) -> np.ndarray:
        return np.array([a.box for a in self.annotations[image_id]], dtype=np.float64).reshape(-1, 4)

    def gt_classes(self, image_id: int) -> np.ndarray:
        return np.array([a.category for a in self.annotations[image_id]], dtype=np.int64)

    def to_json(self) -> dict:
        size = self.scene.image_size
        images = [{"id": i, "width": size, "height": size, "seed": [self.seed, i]}
                  for i in self.image_ids]
        anns = []
        aid = 1
        for i in self.image_ids:
            for a in self.annotations[i]:
                anns.append({"id": aid, "image_id": i, "category_id": a.category,
                             "bbox": [float(v) for v in a.box]})
                aid += 1
        cats = [{"id": k + 1, "name": SHAPES[k]} for k in range(self.scene.num_classes)]
        return {"info": {"split": self.split, "seed": self.seed, "scene": self.scene.to_dict()},
                "images": images, "annotations": anns, "categories": cats}

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True, indent=1))

    @classmethod
    def from_json(cls, doc: dict) -> "Dataset":
        info = doc["info"]
        scene = SceneConfig(**info["scene"])
        ids = [int(im["id"]) for im in doc["images"]]
        anns: Dict[int, List[Annotation]] = {i: [] for i in ids}
        for a in doc["annotations"]:
            if a["image_id"] not in anns:
                raise ValueError(f"annotation references unknown image {a['image_id']}")
            anns[a["image_id"]].append(Annotation(geometry.Box(*a["bbox"]), int(a["category_id"])))
        return cls(scene, int(info["seed"]), ids, anns, info.get("split", "train"))

    @classmethod
    def load(cls, path) -> "Dataset":
        return cls.from_json(json.loads(Path(path).read_text()))


def generate_dataset(cfg: SceneConfig, n_images: int, seed: int, split: str = "train",
                     first_id: int = 1) -> Dataset:
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    ids = list(range(first_id, first_id + n_images))
    anns = {i: render_image(cfg, seed, i).annotations for i in ids}
    return Dataset(cfg, seed, ids, anns, split)


def proposals_for(dataset: Dataset, q: ProposalQuality, seed: int) -> Dict[int, np.ndarray]:
    """Simulated proposals per image, seeded per ``(seed, image id)``."""
    out = {}
    for i in dataset.image_ids:
        rng = np.random.default_rng([int(seed), int(i), 7919])
        out[i] = simulate_proposals(dataset.gt_boxes(i), q, rng, dataset.scene.image_size,
                                    dataset.scene)
    return out


def save_proposals(path, proposals: Dict[int, np.ndarray]) -> None:
    with open(path, "w") as fh:
        for i in sorted(proposals):
            for b in proposals[i]:
                fh.write(json.dumps({"image_id": int(i), "box": [float(v) for v in b]}) + "\n")


def load_proposals(path) -> Dict[int, np.ndarray]:
    rows: Dict[int, list] = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                rows.setdefault(int(rec["image_id"]), []).append([float(v) for v in rec["box"]])
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{n}: malformed proposal record") from exc
    return {k: np.asarray(v, dtype=np.float64).reshape(-1, 4) for k, v in rows.items()}


def size_fractions(boxes: np.ndarray) -> dict:
    """Share of boxes with area below 16^2 and 32^2 and above 96^2."""
    a = geometry.box_areas(boxes)
    if len(a) == 0:
        return {"lt16": 0.0, "lt32": 0.0, "gt96": 0.0}
    return {"lt16": float((a < 16 ** 2).mean()), "lt32": float((a < 32 ** 2).mean()),
            "gt96": float((a > 96 ** 2).mean())}


def write_ppm(path, image: np.ndarray) -> None:
    """Dump a (3, H, W) [0, 1] image as binary PPM for inspection."""
    arr = (np.clip(image, 0, 1) * 255 + 0.5).astype(np.uint8).transpose(1, 2, 0)
    h, w, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6 {w} {h} 255\n".encode())
        fh.write(arr.tobytes())
