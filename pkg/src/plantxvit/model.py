"""PlantXViT assembly, parameter/FLOP accounting and checkpoint files."""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from math import prod
from pathlib import Path

import numpy as np

from . import layers as L
from .tensor import Tensor, layer_norm, relu, softmax, tensor_new

# Layer rows of the published parameter table (name, output shape, params) for
# the canonical 224x224x3 / 4-class / patch-5 configuration.
REFERENCE_PARAM_TABLE = [
    ("Input Layer", (224, 224, 3), 0),
    ("Conv2D", (224, 224, 64), 1792),
    ("Conv2D", (224, 224, 64), 36928),
    ("MaxPooling2D", (112, 112, 64), 0),
    ("Conv2D", (112, 112, 128), 73856),
    ("Conv2D", (112, 112, 128), 147584),
    ("MaxPooling2D", (56, 56, 128), 0),
    ("Inception v7", (56, 56, 512), 361728),
    ("PatchEncoder", (121, 16), 206752),
    ("Transformer block 1", (121, 16), 5440),
    ("Transformer block 2", (121, 16), 5440),
    ("Transformer block 3", (121, 16), 5440),
    ("Transformer block 4", (121, 16), 5440),
    ("Normalization Layer", (121, 16), 32),
    ("Global Average Pooling 1D", (16,), 0),
    ("Output", (4,), 68),
]
REFERENCE_TOTAL = 850_500
REFERENCE_GFLOPS = 11.8
REFERENCE_MEMORY_MB = 3.4

FLOPS_CONVENTION = ("one multiply-accumulate = 2 FLOPs; convolutions, dense layers, "
                    "patch projection and attention matmuls counted; bias adds, "
                    "activations, normalisation, softmax and pooling ignored")


@dataclass(frozen=True)
class PlantXViTConfig:
    input_size: int = 224
    num_classes: int = 4
    patch_size: int = 5
    inception: L.InceptionConfig = field(default_factory=L.InceptionConfig)
    transformer_depth: int = 4
    embed_dim: int = 16
    heads: int = 4
    key_dim: int = 16
    mlp_hidden: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.input_size < 4 or self.input_size % 4:
            raise ValueError(f"input_size must be a positive multiple of 4, got {self.input_size}")
        if not 1 <= self.patch_size <= self.input_size // 4:
            raise ValueError(f"patch_size must lie in [1, {self.input_size // 4}], got {self.patch_size}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        for name in ("transformer_depth", "embed_dim", "heads", "key_dim", "mlp_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def feature_size(self) -> int:
        return self.input_size // 4

    @property
    def n_patches(self) -> int:
        return (self.feature_size // self.patch_size) ** 2


# --------------------------------------------------------------------------
# layers of the graph

class Layer:
    """One row of the model: a named forward function over a shared parameter store."""

    kind = "Layer"

    def __init__(self, name: str):
        self.name = name

    def param_shapes(self) -> dict[str, tuple]:
        return {}

    def init_spec(self, suffix: str, shape: tuple) -> dict:
        if suffix.endswith("bias") or suffix.endswith("beta"):
            return {"init": "zeros"}
        if suffix.endswith("gamma"):
            return {"init": "constant", "value": 1.0}
        return {"init": "he_uniform", "fan_in": prod(shape[:-1])}

    def output_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def flops(self, in_shape: tuple) -> int:
        return 0

    def forward(self, x: Tensor, store) -> Tensor:
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name!r})"


class Conv2DLayer(Layer):
    kind = "Conv2D"

    def __init__(self, name, kh, kw, in_ch, out_ch, activation="relu"):
        super().__init__(name)
        self.spec = (kh, kw, in_ch, out_ch)
        self.activation = activation

    def param_shapes(self):
        return L.conv_param_shapes(*self.spec)

    def output_shape(self, in_shape):
        return in_shape[:2] + (self.spec[3],)

    def flops(self, in_shape):
        kh, kw, cin, cout = self.spec
        return 2 * kh * kw * cin * cout * in_shape[0] * in_shape[1]

    def forward(self, x, store):
        y = L.conv2d(x, L.Conv2DParams.from_store(store, self.name))
        return relu(y) if self.activation == "relu" else y


class MaxPoolLayer(Layer):
    kind = "MaxPooling2D"

    def output_shape(self, in_shape):
        return (in_shape[0] // 2, in_shape[1] // 2, in_shape[2])

    def forward(self, x, store):
        return L.maxpool2d(x, 2, 2)


class InceptionLayer(Layer):
    kind = "Inception"

    def __init__(self, name, cfg: L.InceptionConfig, in_ch: int):
        super().__init__(name)
        self.cfg = cfg
        self.in_ch = in_ch

    def param_shapes(self):
        return self.cfg.param_shapes(self.in_ch)

    def output_shape(self, in_shape):
        return in_shape[:2] + (self.cfg.out_channels,)

    def flops(self, in_shape):
        hw = in_shape[0] * in_shape[1]
        return sum(2 * prod(spec) * hw for spec in self.cfg.conv_specs(self.in_ch).values())

    def forward(self, x, store):
        return L.inception_forward(x, L.inception_convs(store, self.name, self.cfg), self.cfg)


class PatchEncoderLayer(Layer):
    """Patch extraction followed by projection and position embedding."""

    kind = "PatchEncoder"

    def __init__(self, name, patch_size, in_ch, embed_dim, n_patches):
        super().__init__(name)
        self.patch_size = patch_size
        self.patch_dim = patch_size * patch_size * in_ch
        self.embed_dim = embed_dim
        self.n_patches = n_patches

    def param_shapes(self):
        return L.patch_encoder_param_shapes(self.patch_dim, self.embed_dim, self.n_patches)

    def init_spec(self, suffix, shape):
        if suffix == "position_embedding":
            return {"init": "normal", "std": 0.02}
        return super().init_spec(suffix, shape)

    def output_shape(self, in_shape):
        return (self.n_patches, self.embed_dim)

    def flops(self, in_shape):
        return 2 * self.n_patches * self.patch_dim * self.embed_dim

    def forward(self, x, store):
        patches = L.extract_patches(x, self.patch_size)
        return L.patch_encode(patches, L.PatchEncoderParams.from_store(store, self.name))


class TransformerLayer(Layer):
    kind = "Transformer block"

    def __init__(self, name, d, heads, key_dim, mlp_hidden):
        super().__init__(name)
        self.dims = (d, heads, key_dim, mlp_hidden)

    def param_shapes(self):
        return L.transformer_block_param_shapes(*self.dims)

    def init_spec(self, suffix, shape):
        if suffix == "attention/output/kernel":
            return {"init": "he_uniform", "fan_in": shape[0] * shape[1]}
        if suffix.startswith("attention/") and suffix.endswith("kernel"):
            return {"init": "he_uniform", "fan_in": shape[0]}
        return super().init_spec(suffix, shape)

    def flops(self, in_shape):
        d, h, k, hidden = self.dims
        n = in_shape[0]
        projections = 2 * n * d * h * k * 4
        scores_and_mix = 2 * h * n * n * k * 2
        mlp = 2 * n * (d * hidden + hidden * d)
        return projections + scores_and_mix + mlp

    def forward(self, x, store):
        return L.transformer_block(x, L.TransformerBlockParams.from_store(store, self.name))


class NormLayer(Layer):
    kind = "Normalization"

    def __init__(self, name, d):
        super().__init__(name)
        self.d = d

    def param_shapes(self):
        return {"gamma": (self.d,), "beta": (self.d,)}

    def forward(self, x, store):
        return layer_norm(x, store[f"{self.name}/gamma"], store[f"{self.name}/beta"], L.LAYER_NORM_EPS)


class GlobalPoolLayer(Layer):
    kind = "GlobalAveragePooling1D"

    def output_shape(self, in_shape):
        return in_shape[-1:]

    def forward(self, x, store):
        return L.global_avg_pool_1d(x)


class DenseLayer(Layer):
    """Classifier head; produces logits (softmax is applied by :func:`predict`)."""

    kind = "Dense"

    def __init__(self, name, m, n):
        super().__init__(name)
        self.m, self.n = m, n

    def param_shapes(self):
        return {"kernel": (self.m, self.n), "bias": (self.n,)}

    def output_shape(self, in_shape):
        return in_shape[:-1] + (self.n,)

    def flops(self, in_shape):
        return 2 * self.m * self.n

    def forward(self, x, store):
        return L.dense(x, store[f"{self.name}/kernel"], store[f"{self.name}/bias"])


# --------------------------------------------------------------------------
# the graph

def param_seed(base: int, name: str) -> int:
    """Per-tensor seed derived from the model seed and the tensor's name."""
    seq = np.random.SeedSequence([base & 0xFFFFFFFF, base >> 32 & 0xFFFFFFFF, zlib.crc32(name.encode())])
    return int(seq.generate_state(1, np.uint64)[0])


class ModelGraph:
    """Ordered layers sharing one named parameter store.

    ``forward`` returns logits. Any contiguous slice of the layer list can be
    run with ``start``/``stop`` (layer names or indices), which is how the
    explainers reach intermediate feature maps.
    """

    def __init__(self, layers: list[Layer], input_shape: tuple, config: PlantXViTConfig | None = None,
                 params: dict[str, Tensor] | None = None, seed: int = 0):
        names = [layer.name for layer in layers]
        if len(set(names)) != len(names):
            raise ValueError("layer names must be unique")
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.config = config
        self.seed = config.seed if config is not None else seed
        self.params: dict[str, Tensor] = params if params is not None else self.init_params()

    def param_shapes(self) -> dict[str, tuple]:
        shapes = {}
        for layer in self.layers:
            for suffix, shape in layer.param_shapes().items():
                shapes[f"{layer.name}/{suffix}"] = tuple(shape)
        return shapes

    def init_param(self, name: str) -> Tensor:
        layer_name, suffix = name.split("/", 1)
        layer = self.layers[self.layer_index(layer_name)]
        shape = layer.param_shapes()[suffix]
        spec = layer.init_spec(suffix, shape)
        return tensor_new(shape, spec.pop("init"), seed=param_seed(self.seed, name),
                          requires_grad=True, **spec)

    def init_params(self) -> dict[str, Tensor]:
        return {name: self.init_param(name) for name in self.param_shapes()}

    def layer_index(self, ref) -> int:
        if isinstance(ref, int):
            return ref
        for i, layer in enumerate(self.layers):
            if layer.name == ref:
                return i
        raise KeyError(f"unknown layer {ref!r}")

    def layer_shapes(self) -> list[tuple]:
        """Per-sample output shape of every layer."""
        shape, out = self.input_shape, []
        for layer in self.layers:
            shape = layer.output_shape(shape)
            out.append(shape)
        return out

    @property
    def num_classes(self) -> int:
        return self.layer_shapes()[-1][-1]

    def forward(self, x, start=None, stop=None) -> Tensor:
        """Run layers ``start`` (inclusive) through ``stop`` (inclusive, by name or index)."""
        if not isinstance(x, Tensor):
            x = Tensor(x, dtype=np.float32)
        i = 0 if start is None else self.layer_index(start)
        j = len(self.layers) - 1 if stop is None else self.layer_index(stop)
        for layer in self.layers[i:j + 1]:
            x = layer.forward(x, self.params)
        return x

    def with_params(self, params: dict[str, Tensor]) -> "ModelGraph":
        return ModelGraph(self.layers, self.input_shape, self.config, dict(params), self.seed)


def build_model(cfg: PlantXViTConfig) -> ModelGraph:
    """VGG blocks 1-2, inception block, patch encoder, transformer stack, pooled dense head."""
    s, d = cfg.input_size, cfg.embed_dim
    layers = [
        Conv2DLayer("vgg_block1_conv1", 3, 3, 3, 64),
        Conv2DLayer("vgg_block1_conv2", 3, 3, 64, 64),
        MaxPoolLayer("vgg_block1_pool"),
        Conv2DLayer("vgg_block2_conv1", 3, 3, 64, 128),
        Conv2DLayer("vgg_block2_conv2", 3, 3, 128, 128),
        MaxPoolLayer("vgg_block2_pool"),
        InceptionLayer("inception", cfg.inception, 128),
        PatchEncoderLayer("patch_encoder", cfg.patch_size, cfg.inception.out_channels, d, cfg.n_patches),
    ]
    layers += [TransformerLayer(f"transformer_block_{i + 1}", d, cfg.heads, cfg.key_dim, cfg.mlp_hidden)
               for i in range(cfg.transformer_depth)]
    layers += [NormLayer("final_norm", d), GlobalPoolLayer("global_avg_pool"),
               DenseLayer("output", d, cfg.num_classes)]
    return ModelGraph(layers, (s, s, 3), cfg)


def predict(m: ModelGraph, batch) -> Tensor:
    """Class probabilities for a ``[B, H, W, 3]`` batch."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch, dtype=np.float32)
    if x.ndim != 4 or x.shape[1:] != m.input_shape:
        raise ValueError(f"predict expects [B, {', '.join(map(str, m.input_shape))}], got {list(x.shape)}")
    return softmax(m.forward(x), axis=-1)


# --------------------------------------------------------------------------
# accounting

@dataclass
class ParamRow:
    name: str
    kind: str
    output_shape: tuple
    params: int


@dataclass
class ParamTable:
    rows: list[ParamRow]

    @property
    def total(self) -> int:
        return sum(r.params for r in self.rows)

    def by_kind(self, kind: str) -> list[ParamRow]:
        return [r for r in self.rows if r.kind == kind]


def count_params(m: ModelGraph) -> ParamTable:
    rows = [ParamRow("input", "Input", m.input_shape, 0)]
    for layer, shape in zip(m.layers, m.layer_shapes()):
        rows.append(ParamRow(layer.name, layer.kind, shape,
                             sum(prod(s) for s in layer.param_shapes().values())))
    return ParamTable(rows)


def count_flops(m: ModelGraph, by_layer: bool = False):
    """Forward FLOPs for one sample under :data:`FLOPS_CONVENTION`."""
    shape, per_layer = m.input_shape, {}
    for layer in m.layers:
        per_layer[layer.name] = layer.flops(shape)
        shape = layer.output_shape(shape)
    total = sum(per_layer.values())
    return (total, per_layer) if by_layer else total


# --------------------------------------------------------------------------
# checkpoints
#
# Little-endian: b"PXVT", u32 version, u32 tensor count, then per tensor
# u16 name length, UTF-8 name, u8 dtype code, u8 rank, u64 dims, raw data.

MAGIC = b"PXVT"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class CheckpointError(ValueError):
    pass


def _record_header(name: str, shape: tuple, code: int) -> bytes:
    raw = name.encode("utf-8")
    return (struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, len(shape))
            + struct.pack(f"<{len(shape)}Q", *shape))


def checkpoint_header_bytes(shapes: dict[str, tuple]) -> int:
    """Bytes of a checkpoint that are not tensor payload."""
    return 12 + sum(len(_record_header(n, s, 0)) for n, s in shapes.items())


def checkpoint_size(m: ModelGraph) -> int:
    shapes = m.param_shapes()
    return checkpoint_header_bytes(shapes) + 4 * sum(prod(s) for s in shapes.values())


def write_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _DTYPE_CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        chunks.append(_record_header(name, arr.shape, code))
        chunks.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_tensors(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated while reading {what}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a PXVT checkpoint")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        code, rank = struct.unpack("<BB", take(2, f"{name} header"))
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: tensor {name!r} has unknown dtype code {code}")
        shape = struct.unpack(f"<{rank}Q", take(8 * rank, f"{name} dims"))
        dtype = _DTYPES[code]
        nbytes = prod(shape) * dtype.itemsize
        out[name] = np.frombuffer(take(nbytes, f"{name} data"), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


def save_checkpoint(m: ModelGraph, path) -> None:
    write_tensors(path, {name: t.data for name, t in m.params.items()})


def load_checkpoint(path, cfg: PlantXViTConfig, prefix=None) -> ModelGraph:
    """Build a model for ``cfg`` and fill it from ``path``.

    Without ``prefix`` every parameter must be present. With a prefix (or a
    tuple of prefixes) only matching names are loaded; the rest keep their
    seeded initialisation.
    """
    m = build_model(cfg)
    stored = read_tensors(path)
    shapes = m.param_shapes()
    if prefix is None:
        missing = [n for n in shapes if n not in stored]
        if missing:
            raise CheckpointError(f"{path}: missing tensors {missing[:5]}")
        wanted = list(shapes)
    else:
        prefixes = (prefix,) if isinstance(prefix, str) else tuple(prefix)
        wanted = [n for n in shapes if n.startswith(prefixes)]
        absent = [n for n in wanted if n not in stored]
        if absent:
            raise CheckpointError(f"{path}: missing tensors {absent[:5]}")
    for name in wanted:
        arr = stored[name]
        if arr.shape != shapes[name]:
            raise CheckpointError(f"{path}: tensor {name!r} has shape {list(arr.shape)}, "
                                  f"model needs {list(shapes[name])}")
        m.params[name] = Tensor(arr, requires_grad=True, dtype=np.float32)
    return m
