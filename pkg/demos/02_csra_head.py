"""Class-specific residual attention on a hand-made feature map.

Two classes look at a 1 x 3 strip of 2-d features. Class 0 responds to the
first feature channel, class 1 to the second.
"""

import numpy as np

from csranet.csra import INF, AttentionHeadConfig, class_score_map, csra_single_head, fuse_heads, spatial_attention

features = np.array([
    [[4.0, 0.0, 0.0]],   # channel 0 is strong at the left location only
    [[1.0, 1.0, 1.0]],   # channel 1 is flat
])
classifier = np.array([[1.0, 0.0], [0.0, 1.0]])

scores = class_score_map(features, classifier).data
print("score map\n", scores[:, 0, :])

# %% attention sharpens as temperature grows
for t in (0.5, 1.0, 4.0, INF):
    att = spatial_attention(scores, t).data[:, 0, :]
    print(f"T={t}: class 0 attention {att[0].round(3)}  class 1 attention {att[1].round(3)}")

# %% logits: the global average plus lambda times the attended score
for lam in (0.0, 0.1, 1.0):
    logits = csra_single_head(features, classifier, AttentionHeadConfig(INF, lam)).data
    print(f"lambda={lam}: logits {logits.round(4)}")
# class 0 gains from its peaked location; class 1 is flat, so it gains lambda * its mean

# %% several heads are averaged
heads = [AttentionHeadConfig(t, 0.1) for t in (1.0, 2.0, 4.0, INF)]
print("fused logits", fuse_heads(features, classifier, heads).data.round(4))
