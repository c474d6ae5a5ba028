"""Independent reference implementations shared by unit and acceptance tests."""

import numpy as np

from multipath.geometry import Box
from multipath.inference import Detection


def fast_rcnn_labels(props, gts, classes):
    """Single-threshold labels by a plain loop: class of the best gt if IoU >= 50."""
    out = []
    for p in props:
        best, cls = 0.0, 0
        for g, c in zip(gts, classes):
            iw = max(0.0, min(p[2], g[2]) - max(p[0], g[0]))
            ih = max(0.0, min(p[3], g[3]) - max(p[1], g[1]))
            inter = iw * ih
            union = (p[2] - p[0]) * (p[3] - p[1]) + (g[2] - g[0]) * (g[3] - g[1]) - inter
            v = 100.0 * inter / union
            if v > best:
                best, cls = v, c
        out.append(cls if best >= 50 else 0)
    return out


def random_instance(seed, n_images=5, max_gt=6, max_det=15):
    rng = np.random.default_rng(seed)
    truth, dets = {}, {}
    for im in range(n_images):
        ng = int(rng.integers(0, max_gt))
        xy = rng.uniform(0, 100, (ng, 2))
        gb = np.c_[xy, xy + rng.uniform(5, 60, (ng, 2))]
        gc = rng.integers(1, 4, ng)
        truth[im] = (gb, gc)
        ds = []
        for _ in range(int(rng.integers(0, max_det))):
            if ng and rng.random() < 0.7:
                j = rng.integers(ng)
                b = gb[j] + rng.normal(0, 4, 4)
                c = gc[j] if rng.random() < 0.8 else rng.integers(1, 4)
            else:
                p = rng.uniform(0, 100, 2)
                b = np.r_[p, p + rng.uniform(5, 60, 2)]
                c = rng.integers(1, 4)
            b = np.r_[np.minimum(b[:2], b[2:] - 1), b[2:]]
            ds.append(Detection(Box(*b), int(c), float(rng.random())))
        dets[im] = ds
    return dets, truth



def random_boxes(rng, n, size=64.0):
    xy = rng.uniform(0, size * 0.8, (n, 2))
    wh = rng.uniform(2, size * 0.5, (n, 2))
    return np.c_[xy, xy + wh]
