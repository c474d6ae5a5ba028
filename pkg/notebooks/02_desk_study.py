# Train and compare models on synthetic scenes.
#
#   python notebooks/02_desk_study.py            # smoke profile, under a minute
#   python notebooks/02_desk_study.py desk       # the acceptance configuration
#
# Desk models are cached under runs/acceptance/cache, so after the acceptance
# suite has run, the desk variant only evaluates.

# %%
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from multipath import experiments as E
from multipath.config import profile
from multipath.synthdata import ProposalQuality, proposals_for, recall_at, size_fractions
from multipath.trainer import TrainingSet

name = sys.argv[1] if len(sys.argv) > 1 else "smoke"
out = Path("runs/acceptance" if name == "desk" else f"runs/{name}")
run = replace(profile(name), out_dir=str(out))
data = E.prepare_data(run)
images = E.TestImages(data.test)
ts = TrainingSet(data.train, data.train_proposals)
cache = out / "cache"

# %% the synthetic scenes: object count and size mix
boxes = np.concatenate([data.train.scene_of(i).boxes for i in data.train.image_ids])
print("objects per image", len(boxes) / len(data.train.image_ids))
print("size fractions", size_fractions(boxes))

# %% proposal quality controls recall at a fixed count
for q in (0.0, 1.0):
    props = proposals_for(data.test, ProposalQuality(quality=q, count=50), seed=7)
    rec = [recall_at(props[i], data.test.scene_of(i).boxes) for i in data.test.image_ids
           if len(data.test.scene_of(i).boxes)]
    print(f"quality {q:g}: recall@50 proposals {np.mean(rec):.1f}")

# %% AP per IoU threshold for u=50, u=70 and integral-loss training
rows, res = E.integral_trend(run, data, images, cache, ts)
for k, r in res.items():
    curve = " ".join(f"{v:5.1f}" for v in r.per_threshold.values())
    print(f"{k:>8}  AP {r.AP:5.2f}  per threshold {curve}")

# %% AP against proposal count for the integral model
model = E.train_cached(run, run.model, data, cache, tag="integral", training_set=ts)
for r in E.proposals_trend(run, model, images):
    print(r)

# %% test-time flip and dual quantization
for r in E.enhancements(run, [model], images, data.test_proposals):
    print(r)
