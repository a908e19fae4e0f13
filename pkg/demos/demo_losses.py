"""
The three contrastive objectives on hand-built embeddings
=========================================================

Unit vectors stand in for segment, view and caption embeddings so the
behaviour of each loss can be read off directly.
"""
import itertools

import torch

from viewco.losses import count_pairs, multilabel_prompt_loss, seg_consistency_loss, text_views_loss
from viewco.numerics import l2_normalize

torch.manual_seed(0)
D = torch.float64

###############################################################################
# Segment consistency
# -------------------
# Two views of one image, K = 3 segment tokens each. Teacher and student
# tokens are noisy copies of a shared base, so position k in one view matches
# position k in the other.

base = l2_normalize(torch.randn(1, 3, 8, dtype=D))
ut, vt, us, vs = (l2_normalize(base + 0.1 * torch.randn(1, 3, 8, dtype=D)) for _ in range(4))

for perm in itertools.permutations(range(3)):
    p = list(perm)
    loss = seg_consistency_loss(ut, vt, us[:, p], vs[:, p], 0.1).item()
    print(f"student rows {perm}: {loss:.4f}")

# The identity ordering is the unique minimum: matching positions are the
# positives.

###############################################################################
# Caption against both views
# --------------------------
# Each caption has two positives (its image's two views) and 2(B-1) negatives
# per direction.

B = 4
zt = l2_normalize(torch.randn(B, 8, dtype=D))
aligned = text_views_loss(l2_normalize(zt + 0.05 * torch.randn(B, 8, dtype=D)),
                          l2_normalize(zt + 0.05 * torch.randn(B, 8, dtype=D)), zt, 0.1)
shuffled = text_views_loss(zt[[1, 2, 3, 0]], zt[[2, 3, 0, 1]], zt, 0.1)
print(f"aligned views {aligned.item():.4f}, mismatched views {shuffled.item():.4f}")

with count_pairs() as counter:
    text_views_loss(zt, zt, zt, 0.1)
print(dict(counter.positives), dict(counter.negatives))

###############################################################################
# Prompted labels
# ---------------
# M = 3 prompts per caption are all positives for that image's views.

zp = l2_normalize(zt[:, None] + 0.05 * torch.randn(B, 3, 8, dtype=D))
print(f"multi-label loss {multilabel_prompt_loss(zt, zt, zp, 0.1).item():.4f}")
