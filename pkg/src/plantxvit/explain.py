"""Grad-CAM heatmaps, LIME grid explanations and pooled embeddings."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import encode_pgm, resize_bilinear
from .model import GlobalPoolLayer, ModelGraph
from .tensor import GradTape, Tensor, backward

DEFAULT_CAM_LAYER = "inception"


@dataclass
class Heatmap:
    values: np.ndarray  # [H, W] in [0, 1]
    layer: str
    class_index: int
    max_raw: float

    @property
    def peak(self) -> tuple[int, int]:
        return tuple(int(v) for v in np.unravel_index(np.argmax(self.values), self.values.shape))

    def write(self, pgm_path) -> Path:
        """Write the 8-bit PGM and a JSON sidecar next to it; returns the sidecar path."""
        pgm_path = Path(pgm_path)
        pgm_path.write_bytes(encode_pgm(self.values))
        sidecar = pgm_path.with_suffix(".json")
        sidecar.write_text(json.dumps({"layer": self.layer, "class": self.class_index,
                                       "max_raw": self.max_raw, "peak": list(self.peak)}, indent=2))
        return sidecar


def _spatial_layer(m: ModelGraph, layer_name: str | None) -> int:
    shapes = m.layer_shapes()
    if layer_name is None:
        names = [layer.name for layer in m.layers]
        if DEFAULT_CAM_LAYER in names:
            layer_name = DEFAULT_CAM_LAYER
        else:
            spatial = [i for i, s in enumerate(shapes) if len(s) == 3]
            if not spatial:
                raise ValueError("model has no 2-D feature map layer")
            return spatial[-1]
    try:
        idx = m.layer_index(layer_name)
    except KeyError:
        raise ValueError(f"unknown layer {layer_name!r}") from None
    if len(shapes[idx]) != 3:
        raise ValueError(f"layer {layer_name!r} output {list(shapes[idx])} is not a 2-D feature map")
    return idx


def grad_cam(m: ModelGraph, image, class_idx: int, layer_name: str | None = None) -> Heatmap:
    """Class activation map from gradients of the class logit at a feature layer.

    Channel weights are the spatial mean of d(logit)/d(feature). The map is
    ReLU(sum_k w_k A_k), bilinearly resized to the image and divided by its
    maximum (an all-zero map stays zero).
    """
    img = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float32)
    if img.shape != m.input_shape:
        raise ValueError(f"image shape {list(img.shape)} does not match model input {list(m.input_shape)}")
    idx = _spatial_layer(m, layer_name)
    feats = m.forward(img[None], stop=idx)
    leaf = Tensor(feats.data, requires_grad=True)
    with GradTape() as tape:
        logits = m.forward(leaf, start=idx + 1)
        score = logits[0, class_idx]
    grads = backward(score, tape)
    g = grads.get(leaf)
    acts = feats.data[0].astype(np.float64)
    weights = np.zeros(acts.shape[-1]) if g is None else g.data[0].astype(np.float64).mean(axis=(0, 1))
    cam = np.maximum(acts @ weights, 0.0)
    cam = resize_bilinear(cam, img.shape[:2], align_corners=False)
    peak = float(cam.max())
    values = cam / peak if peak > 0 else np.zeros_like(cam)
    return Heatmap(values.astype(np.float32), m.layers[idx].name, int(class_idx), peak)


# --------------------------------------------------------------------------
# LIME

@dataclass
class LimeExplanation:
    grid: tuple[int, int]
    weights: np.ndarray  # one per segment, row-major over the grid
    top_k: list[int]
    r2: float
    intercept: float
    class_index: int

    def to_json(self) -> dict:
        return {"grid": list(self.grid), "class": self.class_index,
                "weights": [float(w) for w in self.weights], "top_k": self.top_k,
                "r2": self.r2, "intercept": self.intercept}

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2))


def grid_segments(height: int, width: int, rows: int, cols: int) -> np.ndarray:
    """``[H, W]`` array of segment ids for a regular ``rows x cols`` grid."""
    if not (1 <= rows <= height and 1 <= cols <= width):
        raise ValueError(f"grid {rows}x{cols} does not fit a {height}x{width} image")
    r = np.searchsorted(np.linspace(0, height, rows + 1)[1:-1], np.arange(height), side="right")
    c = np.searchsorted(np.linspace(0, width, cols + 1)[1:-1], np.arange(width), side="right")
    return r[:, None] * cols + c[None, :]


def fit_local_surrogate(masks: np.ndarray, targets: np.ndarray, sigma: float = 0.25,
                        ridge: float = 1e-3) -> tuple[np.ndarray, float, float]:
    """Weighted ridge regression of ``targets`` on binary ``masks``.

    Sample weight ``exp(-D^2 / sigma^2)`` with ``D`` the fraction of switched-off
    segments. The intercept is not penalised. Returns (coef, intercept, R^2).
    """
    z = np.asarray(masks, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    d = 1.0 - z.mean(axis=1)
    w = np.exp(-(d * d) / (sigma * sigma))
    sw = w.sum()
    z_mean = w @ z / sw
    y_mean = float(w @ y / sw)
    zc, yc = z - z_mean, y - y_mean
    gram = (zc * w[:, None]).T @ zc + ridge * np.eye(z.shape[1])
    coef = np.linalg.solve(gram, (zc * w[:, None]).T @ yc)
    intercept = y_mean - float(z_mean @ coef)
    resid = y - (z @ coef + intercept)
    ss_res = float(w @ (resid * resid))
    ss_tot = float(w @ (yc * yc))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return coef, intercept, r2


def lime_explain(predict_fn, image, class_idx: int, n_samples: int = 512, grid=(8, 8),
                 top_k: int = 5, seed: int = 0, sigma: float = 0.25, ridge: float = 1e-3,
                 batch_size: int = 64) -> LimeExplanation:
    """Perturb grid segments, query ``predict_fn`` and fit a local linear surrogate.

    ``predict_fn`` maps a ``[B, H, W, 3]`` array to ``[B, C]`` probabilities.
    Switched-off segments are filled with the image's mean colour. The first
    perturbation is always the unmodified image.
    """
    img = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float32)
    rows, cols = grid
    n_seg = rows * cols
    if n_samples < n_seg + 1:
        raise ValueError(f"n_samples must be at least {n_seg + 1} for a {rows}x{cols} grid")
    segments = grid_segments(img.shape[0], img.shape[1], rows, cols)
    fill = img.reshape(-1, img.shape[-1]).mean(axis=0)
    rng = np.random.default_rng(seed)
    masks = rng.integers(0, 2, size=(n_samples, n_seg))
    masks[0] = 1
    targets = np.empty(n_samples)
    for start in range(0, n_samples, batch_size):
        chunk = masks[start:start + batch_size]
        keep = chunk[:, segments].astype(bool)[..., None]
        batch = np.where(keep, img[None], fill)
        out = np.asarray(predict_fn(batch))
        if out.ndim != 2 or out.shape[0] != len(chunk) or not 0 <= class_idx < out.shape[1]:
            raise ValueError(f"predict_fn returned shape {list(out.shape)} for a batch of {len(chunk)}")
        targets[start:start + len(chunk)] = out[:, class_idx]
    coef, intercept, r2 = fit_local_surrogate(masks, targets, sigma, ridge)
    order = np.argsort(-coef, kind="stable")
    return LimeExplanation((rows, cols), coef, [int(i) for i in order[:top_k]], r2, intercept, int(class_idx))


# --------------------------------------------------------------------------
# embeddings

def extract_embeddings(m: ModelGraph, images, batch_size: int = 32) -> np.ndarray:
    """Global-average-pool outputs (the classifier's input), one row per image."""
    pools = [layer.name for layer in m.layers if isinstance(layer, GlobalPoolLayer)]
    if not pools:
        raise ValueError("model has no global pooling layer")
    imgs = np.asarray(images, dtype=np.float32)
    if imgs.ndim != 4 or imgs.shape[1:] != m.input_shape:
        raise ValueError(f"images must be [N, {', '.join(map(str, m.input_shape))}], got {list(imgs.shape)}")
    rows = [m.forward(imgs[i:i + batch_size], stop=pools[-1]).data
            for i in range(0, len(imgs), batch_size)]
    return np.concatenate(rows, axis=0)


def write_embeddings(path, embeddings: np.ndarray, labels=None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        width = embeddings.shape[1]
        w.writerow((["label"] if labels is not None else []) + [f"f{i}" for i in range(width)])
        for i, row in enumerate(embeddings):
            lead = [int(labels[i])] if labels is not None else []
            w.writerow(lead + [repr(float(v)) for v in row])
