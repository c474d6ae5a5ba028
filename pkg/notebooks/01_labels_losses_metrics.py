# A tour of the building blocks: per-threshold labels, the integral loss,
# and COCO-style AP on hand-made detections. Runs in a few seconds.

# %%
import numpy as np

from multipath import geometry
from multipath.evaluation import ap_curve, evaluate
from multipath.geometry import Box
from multipath.inference import Detection, nms
from multipath.targets import match_proposals
from multipath.trainer import LossConfig, fast_rcnn_loss, integral_loss

THRESHOLDS = (50, 55, 60, 65, 70, 75)

# %% one ground-truth box and proposals of decreasing overlap
gt = np.array([[20.0, 20.0, 60.0, 60.0]])
props = np.array([[20, 20, 60, 60], [22, 20, 62, 60], [24, 22, 64, 62],
                  [28, 24, 68, 64], [32, 30, 72, 70]], dtype=float)
lab = match_proposals(props, gt, [2], THRESHOLDS)
for iou, row in zip(lab.best_iou, lab.labels):
    print(f"IoU {iou:5.1f}  labels per threshold {row.tolist()}")

# %% each proposal keeps its class up to its IoU and is background beyond it.
#    Next, the foveal regions around the third proposal, clipped to the image.
b = Box(*props[2])
for f in (1.0, 1.5, 2.0, 4.0):
    print(f, [float(v) for v in geometry.clip_box(geometry.foveal_expand(b, f), 128, 128)])

# %% regression targets and their inverse
t = geometry.encode_array(props, np.repeat(gt, len(props), axis=0))
print(np.round(t, 3))
print(np.allclose(geometry.decode_array(props, t), gt))

# %% integral loss: mean of per-threshold losses, one shared regressor
rng = np.random.default_rng(0)
probs = [rng.dirichlet(np.ones(3)) for _ in THRESHOLDS]
row = lab.labels[2]
loss = integral_loss(probs, np.zeros(4), row, lab.t_star[2], LossConfig())
print("integral loss", loss.item(), "labels", row.tolist())

# %% with a single threshold it is the ordinary Fast R-CNN loss
a = integral_loss(probs[:1], np.zeros(4), row[:1], lab.t_star[2], LossConfig(thresholds=(50,))).item()
b_ = fast_rcnn_loss(probs[0], row[0], np.zeros(4), lab.t_star[2]).item()
print(a, b_, a == b_)

# %% NMS keeps the best box per cluster
dets = [Detection(Box(*p), 2, s) for p, s in zip(props, (0.9, 0.8, 0.7, 0.6, 0.5))]
print([d.score for d in nms(dets, 50)])

# %% AP of a detection at IoU 60 is 100 for thresholds up to 60 and 0 above
truth = {0: (gt, np.array([2]))}
d60 = {0: [Detection(Box(20, 20, 60, 44), 2, 0.9)]}
print(geometry.iou(Box(20, 20, 60, 44), Box(*gt[0])))
print(ap_curve(d60, truth))
print("AP", evaluate(d60, truth).AP)
