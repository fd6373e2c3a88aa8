"""Image datasets: PPM/PGM codecs, bilinear resizing, directory loading, synthetic sets."""
from __future__ import annotations

import colorsys
import json
import re
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Tensor


class DatasetError(ValueError):
    pass


@dataclass
class ImageSample:
    pixels: Tensor  # [H, W, 3], values in [0, 1]
    label: int
    source: str
    mask: np.ndarray | None = None  # planted salient region (synthetic sets only)


@dataclass
class DatasetManifest:
    samples: list[ImageSample]
    class_names: list[str]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.class_names)
        for s in self.samples:
            if not 0 <= s.label < n:
                raise DatasetError(f"sample {s.source} has label {s.label} outside [0, {n})")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def counts(self) -> list[int]:
        counts = [0] * self.num_classes
        for s in self.samples:
            counts[s.label] += 1
        return counts

    def images(self, indices=None) -> np.ndarray:
        picked = self.samples if indices is None else [self.samples[i] for i in indices]
        return np.stack([s.pixels.data for s in picked]).astype(np.float32)

    def labels(self, indices=None) -> np.ndarray:
        picked = self.samples if indices is None else [self.samples[i] for i in indices]
        return np.array([s.label for s in picked], dtype=np.int64)

    def subset(self, indices) -> "DatasetManifest":
        return DatasetManifest([self.samples[i] for i in indices], list(self.class_names), dict(self.meta))

    def to_json(self) -> dict:
        return {"classes": self.class_names, "counts": self.counts,
                "files": [{"source": s.source, "label": s.label} for s in self.samples]}

    def write_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))


# --------------------------------------------------------------------------
# codecs

_HEADER_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _parse_netpbm(data: bytes, magic: bytes) -> tuple[int, int, int, int]:
    if data[:2] != magic:
        raise DatasetError(f"unsupported format: expected {magic.decode()} magic, got {data[:2]!r}")
    pos, values = 2, []
    for _ in range(3):
        m = _HEADER_TOKEN.match(data, pos)
        if m is None or not m.group(1).isdigit():
            raise DatasetError("malformed header")
        values.append(int(m.group(1)))
        pos = m.end()
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise DatasetError("truncated header")
    return values[0], values[1], values[2], pos + 1


def decode_ppm(data: bytes) -> Tensor:
    """Binary P6 (maxval 255) to an ``[H, W, 3]`` tensor scaled to [0, 1]."""
    width, height, maxval, start = _parse_netpbm(data, b"P6")
    if maxval != 255:
        raise DatasetError(f"maxval {maxval} unsupported (only 255)")
    n = width * height * 3
    if width < 1 or height < 1:
        raise DatasetError("image has zero size")
    if len(data) - start < n:
        raise DatasetError(f"truncated pixel data: {len(data) - start} of {n} bytes")
    pixels = np.frombuffer(data, dtype=np.uint8, count=n, offset=start)
    return Tensor(pixels.reshape(height, width, 3).astype(np.float32) / 255.0)


def _to_bytes(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode_ppm(image) -> bytes:
    """``[H, W, 3]`` values in [0, 1] to binary P6."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise DatasetError(f"expected [H, W, 3], got {list(arr.shape)}")
    h, w, _ = arr.shape
    return f"P6\n{w} {h}\n255\n".encode() + _to_bytes(arr).tobytes()


def encode_pgm(gray) -> bytes:
    """``[H, W]`` values in [0, 1] to binary 8-bit P5."""
    arr = gray.data if isinstance(gray, Tensor) else np.asarray(gray)
    if arr.ndim != 2:
        raise DatasetError(f"expected [H, W], got {list(arr.shape)}")
    h, w = arr.shape
    return f"P5\n{w} {h}\n255\n".encode() + _to_bytes(arr).tobytes()


def decode_pgm(data: bytes) -> np.ndarray:
    width, height, maxval, start = _parse_netpbm(data, b"P5")
    if maxval != 255:
        raise DatasetError(f"maxval {maxval} unsupported (only 255)")
    n = width * height
    if len(data) - start < n:
        raise DatasetError("truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8, count=n, offset=start).reshape(height, width) / 255.0


# --------------------------------------------------------------------------
# resizing

def _sample_coords(n_in: int, n_out: int, align_corners: bool) -> np.ndarray:
    if align_corners:
        if n_out == 1:
            return np.zeros(1)
        return np.arange(n_out) * ((n_in - 1) / (n_out - 1))
    coords = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    return np.clip(coords, 0, n_in - 1)


def resize_bilinear(img, out: tuple[int, int], align_corners: bool = True):
    """Bilinear resize of ``[H, W]`` or ``[H, W, C]``.

    Corner-aligned by default: output corners sample input corners exactly.
    Returns the same type it was given (Tensor or ndarray).
    """
    as_tensor = isinstance(img, Tensor)
    arr = img.data if as_tensor else np.asarray(img)
    if arr.ndim not in (2, 3) or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"cannot resize array of shape {list(arr.shape)}")
    oh, ow = (int(v) for v in out)
    if oh < 1 or ow < 1:
        raise ValueError(f"target size must be positive, got {(oh, ow)}")
    h, w = arr.shape[:2]
    if (oh, ow) == (h, w):
        res = arr.copy()
    else:
        ys = _sample_coords(h, oh, align_corners)
        xs = _sample_coords(w, ow, align_corners)
        y0 = np.floor(ys).astype(int)
        x0 = np.floor(xs).astype(int)
        y1 = np.minimum(y0 + 1, h - 1)
        x1 = np.minimum(x0 + 1, w - 1)
        wy = (ys - y0)[:, None]
        wx = (xs - x0)[None, :]
        if arr.ndim == 3:
            wy, wx = wy[..., None], wx[..., None]
        a = arr.astype(np.float64)
        top = a[y0][:, x0] * (1 - wx) + a[y0][:, x1] * wx
        bottom = a[y1][:, x0] * (1 - wx) + a[y1][:, x1] * wx
        res = (top * (1 - wy) + bottom * wy).astype(arr.dtype if arr.dtype.kind == "f" else np.float32)
        # interpolation weights are convex; clamp away rounding overshoot
        res = np.clip(res, arr.min(), arr.max())
    return Tensor(res) if as_tensor else res


# --------------------------------------------------------------------------
# datasets

def load_dataset(root, image_size: int, skip_invalid: bool = False) -> DatasetManifest:
    """Read ``root/<class_name>/*.ppm``; classes are numbered in sorted name order."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    class_dirs = sorted((p for p in root.iterdir() if p.is_dir()), key=lambda p: p.name)
    if not class_dirs:
        raise DatasetError(f"dataset root {root} has no class directories")
    samples = []
    for label, cdir in enumerate(class_dirs):
        for path in sorted(cdir.glob("*.ppm"), key=lambda p: p.name):
            try:
                img = decode_ppm(path.read_bytes())
            except (DatasetError, OSError) as exc:
                if not skip_invalid:
                    raise DatasetError(f"{path}: {exc}") from exc
                warnings.warn(f"skipping {path}: {exc}", stacklevel=2)
                continue
            img = resize_bilinear(img, (image_size, image_size))
            samples.append(ImageSample(img, label, str(path)))
    if not samples:
        raise DatasetError(f"dataset root {root} contains no images")
    return DatasetManifest(samples, [p.name for p in class_dirs], {"root": str(root)})


def save_dataset(ds: DatasetManifest, root) -> None:
    """Write a manifest back out as a ``root/<class>/*.ppm`` tree."""
    root = Path(root)
    for name in ds.class_names:
        (root / name).mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(ds.samples):
        (root / ds.class_names[s.label] / f"{i:05d}.ppm").write_bytes(encode_ppm(s.pixels))


def class_palette(classes: int) -> np.ndarray:
    return np.array([colorsys.hsv_to_rgb(c / classes, 0.9, 0.95) for c in range(classes)])


def class_anchor(c: int, classes: int, size: int) -> tuple[float, float]:
    angle = 2 * np.pi * c / classes + np.pi / 4
    r = 0.25 * size
    return size / 2 + r * np.sin(angle), size / 2 + r * np.cos(angle)


def synth_dataset(classes: int = 4, per_class: int = 16, image_size: int = 64, seed: int = 0,
                  blob_radius: float = 0.16, noise: float = 0.08) -> DatasetManifest:
    """Learnable stand-in dataset.

    Each image is mid-grey noise with one disc. The disc colour and its
    nominal position depend only on the class; the seed draws the noise and a
    small position jitter. ``sample.mask`` marks the disc.
    """
    if classes < 2:
        raise DatasetError("synthetic dataset needs at least 2 classes")
    rng = np.random.default_rng(seed)
    palette = class_palette(classes)
    radius = blob_radius * image_size
    jitter = image_size / 16
    yy, xx = np.mgrid[0:image_size, 0:image_size] + 0.5
    samples = []
    for c in range(classes):
        cy, cx = class_anchor(c, classes, image_size)
        for i in range(per_class):
            img = 0.5 + noise * rng.standard_normal((image_size, image_size, 3))
            dy, dx = rng.uniform(-jitter, jitter, size=2)
            mask = (yy - cy - dy) ** 2 + (xx - cx - dx) ** 2 <= radius ** 2
            img[mask] = palette[c] + 0.5 * noise * rng.standard_normal((mask.sum(), 3))
            img = np.clip(img, 0.0, 1.0).astype(np.float32)
            samples.append(ImageSample(Tensor(img), c, f"synth:{seed}:{c}:{i}", mask))
    names = [f"class_{c}" for c in range(classes)]
    return DatasetManifest(samples, names, {"synthetic": True, "seed": seed})
