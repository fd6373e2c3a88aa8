"""Small random parameter sets shared by the layer tests."""
import numpy as np

from plantxvit.layers import (AttentionParams, Conv2DParams, PatchEncoderParams,
                              TransformerBlockParams, attention_param_shapes, transformer_block_param_shapes)
from plantxvit.tensor import Tensor


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def conv_params(rng, kh, kw, cin, cout, stride=1, padding="same"):
    return Conv2DParams(t64(rng.standard_normal((kh, kw, cin, cout)) * 0.5),
                        t64(rng.standard_normal(cout) * 0.1), stride, padding)


def attention_params(rng, d, heads, key_dim, scale=0.4):
    shapes = attention_param_shapes(d, heads, key_dim)
    return AttentionParams.from_store({f"a/{k}": t64(rng.standard_normal(s) * scale) for k, s in shapes.items()}, "a")


def block_store(rng, d, heads, key_dim, hidden, scale=0.4):
    shapes = transformer_block_param_shapes(d, heads, key_dim, hidden)
    return {f"b/{k}": rng.standard_normal(s) * scale for k, s in shapes.items()}


def block_params(store):
    return TransformerBlockParams.from_store({k: t64(v) for k, v in store.items()}, "b")


def small_inception_specs(in_ch, b1=2, b2r=2, b2=1, b3r=2, b3m=2, b3=1, b4=2):
    """Branch geometry of the inception block at toy widths (no 512-channel rule)."""
    return {"b1_1x1": (1, 1, in_ch, b1), "b2_1x1": (1, 1, in_ch, b2r), "b2_1x3": (1, 3, b2r, b2),
            "b2_3x1": (3, 1, b2r, b2), "b3_1x1": (1, 1, in_ch, b3r), "b3_3x3": (3, 3, b3r, b3m),
            "b3_1x3": (1, 3, b3m, b3), "b3_3x1": (3, 1, b3m, b3), "b4_1x1": (1, 1, in_ch, b4)}


def inception_store(rng, specs, prefix="inc"):
    store = {}
    for name, (kh, kw, ci, co) in specs.items():
        store[f"{prefix}/{name}/kernel"] = rng.standard_normal((kh, kw, ci, co)) * 0.5
        store[f"{prefix}/{name}/bias"] = rng.standard_normal(co) * 0.1 + 0.2
    return store


def patch_params(rng, patch_dim, d, n):
    return PatchEncoderParams(t64(rng.standard_normal((patch_dim, d)) * 0.3), t64(rng.standard_normal(d) * 0.1),
                              t64(rng.standard_normal((n, d)) * 0.02))


# -- a planted-signal model for the Grad-CAM checks --------------------------------------

from plantxvit.model import Conv2DLayer, Layer, ModelGraph  # noqa: E402
from plantxvit.tensor import concat, mean, neg, take  # noqa: E402


class ChannelScore(Layer):
    """Logit 0 is the spatial mean of channel 0, logit 1 its negation."""

    kind = "Score"

    def output_shape(self, in_shape):
        return (2,)

    def forward(self, x, store):
        ch0 = mean(take(x, (Ellipsis, slice(0, 1))), axis=(1, 2))
        return concat([ch0, neg(ch0)], axis=-1)


def channel_surrogate(size=16, channels=4, seed=0):
    layers = [Conv2DLayer("features", 3, 3, 3, channels), ChannelScore("score")]
    return ModelGraph(layers, (size, size, 3), seed=seed)


def planted_segment_oracle(image, segments, segment_id):
    """Black box scoring 1 for class 0 exactly when ``segment_id`` is left intact."""
    region = segments == segment_id

    def predict(batch):
        intact = np.all(batch[:, region] == image[region], axis=(1, 2)).astype(np.float64)
        return np.stack([intact, 1 - intact], axis=1)

    return predict
