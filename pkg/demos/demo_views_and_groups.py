"""
Scenes, view pairs and patch-to-segment maps
============================================

A synthetic scene is cut into two augmented views; masks move between the
views through their geometry records, and an (untrained) grouping encoder
maps every patch to one of K segments.
"""
from pathlib import Path

import numpy as np
import torch

from viewco.data import augment_two_views, gen_scene, render, warp_mask
from viewco.encoder import EncoderConfig, GroupEncoder
from viewco.pnm import write_image, write_mask

out = Path("demo_output")
out.mkdir(exist_ok=True)

scene = gen_scene(11)
print(scene.caption, [s.cls for s in scene.shapes])
write_image(out / "scene.ppm", scene.canvas)
write_mask(out / "scene_mask.pgm", scene.gt_mask * 80)

###############################################################################
# Two views and their geometry

pair = augment_two_views(scene, rng_seed=3)
print(pair.geom_u)
print(pair.geom_v)

mask_u = render(scene.gt_mask, pair.geom_u)
mask_v = render(scene.gt_mask, pair.geom_v)
warped, valid = warp_mask(mask_u, pair.geom_u, pair.geom_v)
print(f"overlap {valid.mean():.2f} of view v, agreement {(warped[valid] == mask_v[valid]).mean():.3f}")

###############################################################################
# Grouping
# --------
# 16 patches go to 8 groups, then to 4 segments. The composed map is the
# product of the two stage maps.

torch.manual_seed(0)
enc = GroupEncoder(EncoderConfig.toy())
with torch.no_grad():
    res = enc(torch.from_numpy(np.stack([pair.view_u, pair.view_v])).float())
segs = res.assignment.argmax(-1).reshape(2, 4, 4)
print(segs)
a, b = res.stage_assignments
print("composed == product:", torch.equal(res.assignment, a @ b))
write_mask(out / "segments_u.pgm", np.kron(segs[0].numpy(), np.ones((8, 8), dtype=np.int64)) * 60)
