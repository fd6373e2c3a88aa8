"""
Grad-CAM and LIME
=================

Grad-CAM on a model whose class score is the mean of one conv channel, then
LIME on a black box that reacts to a single grid cell.
"""

import numpy as np

from plantxvit.explain import grad_cam, grid_segments, lime_explain
from plantxvit.model import Conv2DLayer, Layer, ModelGraph
from plantxvit.tensor import concat, mean, neg, take


class ChannelScore(Layer):
    kind = "Score"

    def output_shape(self, in_shape):
        return (2,)

    def forward(self, x, store):
        ch0 = mean(take(x, (Ellipsis, slice(0, 1))), axis=(1, 2))
        return concat([ch0, neg(ch0)], axis=-1)


m = ModelGraph([Conv2DLayer("features", 3, 3, 3, 4), ChannelScore("score")], (16, 16, 3))
img = np.random.default_rng(0).uniform(size=(16, 16, 3)).astype(np.float32)
heat = grad_cam(m, img, 0, "features")
act = np.maximum(m.forward(img[None], stop="features").data[0, ..., 0], 0)
print(heat.peak, np.corrcoef(heat.values.ravel(), act.ravel())[0, 1])

# %%
# The heatmap is in [0, 1]; ``write`` stores it as an 8-bit PGM.
print(heat.values.min(), heat.values.max())

# %%
# LIME: the black box answers class 0 only while cell 17 is untouched.
segments = grid_segments(32, 32, 8, 8)
photo = np.random.default_rng(1).uniform(size=(32, 32, 3)).astype(np.float32)
region = segments == 17


def black_box(batch):
    intact = np.all(batch[:, region] == photo[region], axis=(1, 2)).astype(float)
    return np.stack([intact, 1 - intact], axis=1)


exp = lime_explain(black_box, photo, 0, n_samples=512, grid=(8, 8), seed=0)
print(exp.top_k, np.round(exp.weights[exp.top_k], 3), round(exp.r2, 3))
