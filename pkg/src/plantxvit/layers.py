"""Layer primitives for the hybrid CNN / transformer classifier.

Spatial tensors are channels-last: ``[H, W, C]`` or batched ``[B, H, W, C]``.
Sequence tensors are ``[n, d]`` or batched ``[B, n, d]``. Every function
accepts the unbatched form and returns the same rank it was given.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass
from math import prod

import numpy as np

from .tensor import (Tensor, add, apply, concat, layer_norm, matmul, mean,
                     relu, reshape, softmax, transpose, gelu)

LAYER_NORM_EPS = 1e-6


# --------------------------------------------------------------------------
# parameter containers

@dataclass
class Conv2DParams:
    kernel: Tensor  # [kh, kw, in_ch, out_ch]
    bias: Tensor  # [out_ch]
    stride: int = 1
    padding: str = "same"

    @property
    def count(self) -> int:
        return self.kernel.size + self.bias.size

    @classmethod
    def from_store(cls, store, prefix: str, stride: int = 1, padding: str = "same"):
        return cls(store[f"{prefix}/kernel"], store[f"{prefix}/bias"], stride, padding)


def conv_param_shapes(kh: int, kw: int, in_ch: int, out_ch: int) -> dict[str, tuple]:
    return {"kernel": (kh, kw, in_ch, out_ch), "bias": (out_ch,)}


@dataclass(frozen=True)
class InceptionConfig:
    """Channel widths of the four-branch multi-scale block.

    Branches: 1x1 | 1x1 -> {1x3, 3x1} | 1x1 -> 3x3 -> {1x3, 3x1} | 3x3 maxpool -> 1x1.
    The factorised pairs run in parallel on the same input and are
    concatenated, so branches 2 and 3 emit twice their ``*_out`` width.

    The default widths give 361,728 parameters on a 128-channel input.
    """

    branch1: int = 128
    branch2_reduce: int = 256
    branch2_out: int = 80
    branch3_reduce: int = 176
    branch3_mid: int = 80
    branch3_out: int = 48
    branch4: int = 128

    OUT_CHANNELS = 512

    def __post_init__(self):
        widths = self.widths()
        if any(int(w) != w or w < 1 for w in widths):
            raise ValueError(f"inception widths must be positive integers, got {widths}")
        if self.out_channels != self.OUT_CHANNELS:
            raise ValueError(
                f"inception branch outputs sum to {self.out_channels}, expected {self.OUT_CHANNELS}")

    @classmethod
    def from_widths(cls, widths) -> "InceptionConfig":
        widths = [int(w) for w in widths]
        if len(widths) != 7:
            raise ValueError("inception needs 7 widths: b1, b2_reduce, b2_out, b3_reduce, b3_mid, b3_out, b4")
        return cls(*widths)

    @classmethod
    def factorized_small(cls) -> "InceptionConfig":
        """64 | 64->{64,64} | 64->96->{96,96} | pool->128 (176,864 parameters)."""
        return cls(64, 64, 64, 64, 96, 96, 128)

    def widths(self) -> list[int]:
        return [self.branch1, self.branch2_reduce, self.branch2_out, self.branch3_reduce,
                self.branch3_mid, self.branch3_out, self.branch4]

    @property
    def out_channels(self) -> int:
        return self.branch1 + 2 * self.branch2_out + 2 * self.branch3_out + self.branch4

    def conv_specs(self, in_ch: int) -> dict[str, tuple[int, int, int, int]]:
        """Name -> (kh, kw, in_ch, out_ch) for every convolution in the block."""
        return {
            "b1_1x1": (1, 1, in_ch, self.branch1),
            "b2_1x1": (1, 1, in_ch, self.branch2_reduce),
            "b2_1x3": (1, 3, self.branch2_reduce, self.branch2_out),
            "b2_3x1": (3, 1, self.branch2_reduce, self.branch2_out),
            "b3_1x1": (1, 1, in_ch, self.branch3_reduce),
            "b3_3x3": (3, 3, self.branch3_reduce, self.branch3_mid),
            "b3_1x3": (1, 3, self.branch3_mid, self.branch3_out),
            "b3_3x1": (3, 1, self.branch3_mid, self.branch3_out),
            "b4_1x1": (1, 1, in_ch, self.branch4),
        }

    def param_shapes(self, in_ch: int) -> dict[str, tuple]:
        shapes = {}
        for name, spec in self.conv_specs(in_ch).items():
            for suffix, shape in conv_param_shapes(*spec).items():
                shapes[f"{name}/{suffix}"] = shape
        return shapes

    def param_count(self, in_ch: int) -> int:
        return sum(prod(s) for s in self.param_shapes(in_ch).values())


@dataclass
class PatchEncoderParams:
    kernel: Tensor  # [p*p*C, d]
    bias: Tensor  # [d]
    position: Tensor  # [n_patches, d]

    @property
    def count(self) -> int:
        return self.kernel.size + self.bias.size + self.position.size

    @classmethod
    def from_store(cls, store, prefix: str):
        return cls(store[f"{prefix}/projection/kernel"], store[f"{prefix}/projection/bias"],
                   store[f"{prefix}/position_embedding"])


def patch_encoder_param_shapes(patch_dim: int, d: int, n_patches: int) -> dict[str, tuple]:
    return {"projection/kernel": (patch_dim, d), "projection/bias": (d,),
            "position_embedding": (n_patches, d)}


@dataclass
class AttentionParams:
    """Per-head Q/K/V projections stored head-major, as ``[d, heads, key_dim]``."""

    query_kernel: Tensor
    query_bias: Tensor
    key_kernel: Tensor
    key_bias: Tensor
    value_kernel: Tensor
    value_bias: Tensor
    output_kernel: Tensor  # [heads, key_dim, d]
    output_bias: Tensor  # [d]

    @property
    def heads(self) -> int:
        return self.query_kernel.shape[1]

    @property
    def key_dim(self) -> int:
        return self.query_kernel.shape[2]

    @property
    def count(self) -> int:
        return sum(t.size for t in vars(self).values())

    @classmethod
    def from_store(cls, store, prefix: str):
        get = lambda part, kind: store[f"{prefix}/{part}/{kind}"]
        return cls(get("query", "kernel"), get("query", "bias"), get("key", "kernel"),
                   get("key", "bias"), get("value", "kernel"), get("value", "bias"),
                   get("output", "kernel"), get("output", "bias"))


def attention_param_shapes(d: int, heads: int, key_dim: int) -> dict[str, tuple]:
    shapes = {}
    for part in ("query", "key", "value"):
        shapes[f"{part}/kernel"] = (d, heads, key_dim)
        shapes[f"{part}/bias"] = (heads, key_dim)
    shapes["output/kernel"] = (heads, key_dim, d)
    shapes["output/bias"] = (d,)
    return shapes


@dataclass
class TransformerBlockParams:
    norm1_gamma: Tensor
    norm1_beta: Tensor
    attention: AttentionParams
    norm2_gamma: Tensor
    norm2_beta: Tensor
    mlp_kernel1: Tensor  # [d, hidden]
    mlp_bias1: Tensor
    mlp_kernel2: Tensor  # [hidden, d]
    mlp_bias2: Tensor

    @classmethod
    def from_store(cls, store, prefix: str):
        return cls(store[f"{prefix}/norm1/gamma"], store[f"{prefix}/norm1/beta"],
                   AttentionParams.from_store(store, f"{prefix}/attention"),
                   store[f"{prefix}/norm2/gamma"], store[f"{prefix}/norm2/beta"],
                   store[f"{prefix}/mlp/dense1/kernel"], store[f"{prefix}/mlp/dense1/bias"],
                   store[f"{prefix}/mlp/dense2/kernel"], store[f"{prefix}/mlp/dense2/bias"])


def transformer_block_param_shapes(d: int, heads: int, key_dim: int, mlp_hidden: int) -> dict[str, tuple]:
    shapes = {"norm1/gamma": (d,), "norm1/beta": (d,)}
    shapes.update({f"attention/{k}": v for k, v in attention_param_shapes(d, heads, key_dim).items()})
    shapes.update({"norm2/gamma": (d,), "norm2/beta": (d,),
                   "mlp/dense1/kernel": (d, mlp_hidden), "mlp/dense1/bias": (mlp_hidden,),
                   "mlp/dense2/kernel": (mlp_hidden, d), "mlp/dense2/bias": (d,)})
    return shapes


# --------------------------------------------------------------------------
# convolution and pooling

def _batched(fn):
    """Let a [B,H,W,C] primitive also accept a single [H,W,C] map."""

    @functools.wraps(fn)
    def wrapper(x: Tensor, *args, **kwargs):
        if x.ndim == 3:
            out = fn(reshape(x, (1,) + x.shape), *args, **kwargs)
            return reshape(out, out.shape[1:])
        if x.ndim != 4:
            raise ValueError(f"expected [H,W,C] or [B,H,W,C], got shape {list(x.shape)}")
        return fn(x, *args, **kwargs)

    return wrapper


def _window_geometry(h: int, w: int, kh: int, kw: int, stride: int, padding: str):
    if padding == "same":
        ho, wo = -(-h // stride), -(-w // stride)
        ph = max((ho - 1) * stride + kh - h, 0)
        pw = max((wo - 1) * stride + kw - w, 0)
        pads = (ph // 2, ph - ph // 2, pw // 2, pw - pw // 2)
    elif padding == "valid":
        if kh > h or kw > w:
            raise ValueError(f"window {kh}x{kw} larger than input {h}x{w}")
        ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
        pads = (0, 0, 0, 0)
    else:
        raise ValueError(f"padding must be 'same' or 'valid', got {padding!r}")
    if kh > h + pads[0] + pads[1] or kw > w + pads[2] + pads[3]:
        raise ValueError(f"window {kh}x{kw} larger than padded input")
    return pads, ho, wo


def _gather_windows(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, _, _, c = xp.shape
    cols = np.empty((b, ho, wo, kh, kw, c), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * (ho - 1) + 1:stride,
                                        j:j + stride * (wo - 1) + 1:stride, :]
    return cols


def _scatter_windows(dcols: np.ndarray, padded_shape, stride: int, ho: int, wo: int) -> np.ndarray:
    kh, kw = dcols.shape[3], dcols.shape[4]
    dxp = np.zeros(padded_shape, dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * (ho - 1) + 1:stride,
                j:j + stride * (wo - 1) + 1:stride, :] += dcols[:, :, :, i, j, :]
    return dxp


def _pad(x: np.ndarray, pads, value=0.0) -> np.ndarray:
    if not any(pads):
        return x
    t, b, l, r = pads
    return np.pad(x, ((0, 0), (t, b), (l, r), (0, 0)), constant_values=value)


def _crop(xp: np.ndarray, pads) -> np.ndarray:
    t, b, l, r = pads
    return xp[:, t:xp.shape[1] - b, l:xp.shape[2] - r, :]


@_batched
def conv2d(x: Tensor, params: Conv2DParams) -> Tensor:
    """2-D cross-correlation plus bias (im2col + one GEMM)."""
    kernel, bias, stride = params.kernel, params.bias, params.stride
    kh, kw, cin, cout = kernel.shape
    bsz, h, w, c = x.shape
    if c != cin:
        raise ValueError(f"conv2d expects {cin} input channels, got {c}")
    if bias.shape != (cout,):
        raise ValueError(f"conv2d bias must have shape [{cout}], got {list(bias.shape)}")
    pads, ho, wo = _window_geometry(h, w, kh, kw, stride, params.padding)
    pointwise = kh == kw == 1 and stride == 1
    xp = _pad(x.data, pads)
    cols = xp if pointwise else _gather_windows(xp, kh, kw, stride, ho, wo)
    cols2 = cols.reshape(-1, kh * kw * cin)
    k2 = kernel.data.reshape(kh * kw * cin, cout)
    out = (cols2 @ k2 + bias.data).reshape(bsz, ho, wo, cout)

    def grad_fn(g):
        g2 = np.ascontiguousarray(g).reshape(-1, cout)
        gk = (cols2.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        gb = g2.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = g2 @ k2.T
            if pointwise:
                gx = dcols.reshape(x.shape)
            else:
                dcols = dcols.reshape(bsz, ho, wo, kh, kw, cin)
                gx = _crop(_scatter_windows(dcols, xp.shape, stride, ho, wo), pads)
        return gx, gk, gb

    return apply(out, (x, kernel, bias), grad_fn)


@_batched
def maxpool2d(x: Tensor, size: int = 2, stride: int = 2, padding: str = "valid") -> Tensor:
    """Per-channel window maximum. Ties route the gradient to the first maximum."""
    bsz, h, w, c = x.shape
    if padding == "valid" and ((h - size) % stride or (w - size) % stride):
        raise ValueError(f"{h}x{w} input does not tile with pool {size}/{stride} without padding")
    pads, ho, wo = _window_geometry(h, w, size, size, stride, padding)
    xp = _pad(x.data, pads, value=-np.inf)
    cols = _gather_windows(xp, size, size, stride, ho, wo).reshape(bsz, ho, wo, size * size, c)
    idx = cols.argmax(axis=3)[:, :, :, None, :]
    out = np.take_along_axis(cols, idx, axis=3)[:, :, :, 0, :]

    def grad_fn(g):
        dcols = np.zeros(cols.shape, dtype=g.dtype)
        np.put_along_axis(dcols, idx, g[:, :, :, None, :], axis=3)
        dcols = dcols.reshape(bsz, ho, wo, size, size, c)
        return (_crop(_scatter_windows(dcols, xp.shape, stride, ho, wo), pads),)

    return apply(out, (x,), grad_fn)


def dense(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Affine map on the last axis: ``x @ kernel + bias``."""
    m, n = kernel.shape
    if x.shape[-1] != m:
        raise ValueError(f"dense expects last axis {m}, got {x.shape[-1]}")
    if bias.shape != (n,):
        raise ValueError(f"dense bias must have shape [{n}], got {list(bias.shape)}")
    lead = x.shape[:-1]
    flat = x if x.ndim == 2 else reshape(x, (prod(lead), m))
    out = add(matmul(flat, kernel), bias)
    return out if x.ndim == 2 else reshape(out, lead + (n,))


# --------------------------------------------------------------------------
# inception block

def _conv_relu(x: Tensor, params: Conv2DParams) -> Tensor:
    return relu(conv2d(x, params))


def inception_branches(x: Tensor, convs: dict[str, Conv2DParams]) -> list[Tensor]:
    """The four branch outputs, before concatenation. Widths come from ``convs``."""
    b1 = _conv_relu(x, convs["b1_1x1"])
    r2 = _conv_relu(x, convs["b2_1x1"])
    b2 = concat([_conv_relu(r2, convs["b2_1x3"]), _conv_relu(r2, convs["b2_3x1"])], axis=-1)
    r3 = _conv_relu(_conv_relu(x, convs["b3_1x1"]), convs["b3_3x3"])
    b3 = concat([_conv_relu(r3, convs["b3_1x3"]), _conv_relu(r3, convs["b3_3x1"])], axis=-1)
    b4 = _conv_relu(maxpool2d(x, size=3, stride=1, padding="same"), convs["b4_1x1"])
    return [b1, b2, b3, b4]


def inception_convs(store, prefix: str, cfg: InceptionConfig) -> dict[str, Conv2DParams]:
    return {name: Conv2DParams.from_store(store, f"{prefix}/{name}") for name in cfg.conv_specs(1)}


def inception_forward(x: Tensor, convs: dict[str, Conv2DParams], cfg: InceptionConfig) -> Tensor:
    """Multi-scale block: branch outputs concatenated on the channel axis."""
    in_ch = convs["b1_1x1"].kernel.shape[2]
    if x.shape[-1] != in_ch:
        raise ValueError(f"inception expects {in_ch} input channels, got {x.shape[-1]}")
    for name, spec in cfg.conv_specs(in_ch).items():
        if convs[name].kernel.shape != spec[:4]:
            raise ValueError(f"inception conv {name} has kernel {list(convs[name].kernel.shape)}, "
                             f"config needs {list(spec)}")
    return concat(inception_branches(x, convs), axis=-1)


# --------------------------------------------------------------------------
# patches and transformer

def patch_grid(size: int, p: int) -> int:
    if p < 1 or p > size:
        raise ValueError(f"patch size {p} must lie in [1, {size}]")
    return size // p


def extract_patches(fmap: Tensor, p: int) -> Tensor:
    """Non-overlapping ``p x p`` patches, row-major, flattened as ``(row, col, channel)``.

    Rows/columns past the last whole patch are dropped.
    """
    single = fmap.ndim == 3
    x = reshape(fmap, (1,) + fmap.shape) if single else fmap
    b, h, w, c = x.shape
    nh, nw = patch_grid(h, p), patch_grid(w, p)
    if nh * p != h or nw * p != w:
        x = x[:, :nh * p, :nw * p, :]
    x = reshape(x, (b, nh, p, nw, p, c))
    x = transpose(x, (0, 1, 3, 2, 4, 5))
    x = reshape(x, (b, nh * nw, p * p * c))
    return reshape(x, x.shape[1:]) if single else x


def assemble_patches(patches: np.ndarray, rows: int, cols: int, p: int, channels: int) -> np.ndarray:
    """Inverse of :func:`extract_patches` on the kept region (plain arrays)."""
    grid = np.asarray(patches).reshape(rows, cols, p, p, channels)
    return grid.transpose(0, 2, 1, 3, 4).reshape(rows * p, cols * p, channels)


def patch_encode(patches: Tensor, params: PatchEncoderParams) -> Tensor:
    """Linear projection of each patch plus its learned position embedding."""
    n = patches.shape[-2]
    if params.position.shape[0] != n:
        raise ValueError(f"position embedding has {params.position.shape[0]} rows for {n} patches")
    return add(dense(patches, params.kernel, params.bias), params.position)


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    dk = q.shape[-1]
    if k.shape[-1] != dk:
        raise ValueError(f"query width {dk} differs from key width {k.shape[-1]}")
    axes = tuple(range(k.ndim - 2)) + (k.ndim - 1, k.ndim - 2)
    scores = matmul(q, transpose(k, axes)) * (1.0 / np.sqrt(dk))
    return softmax(scores, axis=-1)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """``softmax(q k^T / sqrt(dk)) v`` over the last two axes."""
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"keys ({k.shape[-2]}) and values ({v.shape[-2]}) differ in length")
    return matmul(attention_weights(q, k), v)


def multi_head_attention(x: Tensor, params: AttentionParams) -> Tensor:
    n, d = x.shape[-2:]
    h, kd = params.heads, params.key_dim
    expected = attention_param_shapes(d, h, kd)
    for name, t in (("query/kernel", params.query_kernel), ("key/kernel", params.key_kernel),
                    ("value/kernel", params.value_kernel), ("query/bias", params.query_bias),
                    ("key/bias", params.key_bias), ("value/bias", params.value_bias),
                    ("output/kernel", params.output_kernel), ("output/bias", params.output_bias)):
        if t.shape != expected[name]:
            raise ValueError(f"attention {name} has shape {list(t.shape)}, expected {list(expected[name])}")
    lead = x.shape[:-2]
    b = prod(lead)
    flat = reshape(x, (b * n, d))

    def project(kernel, bias):
        y = add(matmul(flat, reshape(kernel, (d, h * kd))), reshape(bias, (h * kd,)))
        return transpose(reshape(y, (b, n, h, kd)), (0, 2, 1, 3))

    heads = scaled_dot_attention(project(params.query_kernel, params.query_bias),
                                 project(params.key_kernel, params.key_bias),
                                 project(params.value_kernel, params.value_bias))
    merged = reshape(transpose(heads, (0, 2, 1, 3)), (b * n, h * kd))
    out = add(matmul(merged, reshape(params.output_kernel, (h * kd, d))), params.output_bias)
    return reshape(out, lead + (n, d))


def transformer_block(x: Tensor, params: TransformerBlockParams, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Pre-norm encoder block: attention and GELU MLP, each with a residual."""
    y = add(multi_head_attention(layer_norm(x, params.norm1_gamma, params.norm1_beta, eps),
                                 params.attention), x)
    hidden = gelu(dense(layer_norm(y, params.norm2_gamma, params.norm2_beta, eps),
                        params.mlp_kernel1, params.mlp_bias1))
    return add(dense(hidden, params.mlp_kernel2, params.mlp_bias2), y)


def global_avg_pool_1d(x: Tensor) -> Tensor:
    """Mean over the sequence axis: ``[..., n, d] -> [..., d]``."""
    return mean(x, axis=-2)
