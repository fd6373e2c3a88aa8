"""Loss, optimizers, dataset splitting and the epoch loop."""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from .data import DatasetManifest
from .model import ModelGraph
from .tensor import GradTape, Tensor, apply, backward, softmax

CLIP = 1e-7
OPTIMIZERS = ("sgd", "rmsprop", "adamax", "adam", "nadam")


class NumericError(RuntimeError):
    """Raised when the training loss stops being finite."""


def cross_entropy(y_true, y_pred: Tensor) -> Tensor:
    """Mean categorical cross-entropy of one-hot targets against probabilities.

    Probabilities are clipped to ``[1e-7, 1 - 1e-7]`` before the log; the
    gradient is zero where clipping is active.
    """
    t = y_true.data if isinstance(y_true, Tensor) else np.asarray(y_true)
    if t.shape != y_pred.shape or y_pred.ndim != 2:
        raise ValueError(f"cross_entropy shape mismatch: {list(t.shape)} vs {list(y_pred.shape)}")
    p = y_pred.data
    clipped = np.clip(p, CLIP, 1 - CLIP)
    n = p.shape[0]
    loss = -(t * np.log(clipped)).sum() / n

    def grad_fn(g):
        inside = (p >= CLIP) & (p <= 1 - CLIP)
        return (np.where(inside, -g * t / (clipped * n), 0.0),)

    return apply(np.asarray(loss, dtype=p.dtype), (y_pred,), grad_fn)


def one_hot(labels, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((labels.size, classes), dtype=np.float32)
    out[np.arange(labels.size), labels] = 1.0
    return out


# --------------------------------------------------------------------------
# optimizers

@dataclass
class OptimizerState:
    kind: str = "adam"
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    rho: float = 0.9
    epsilon: float = 1e-7
    momentum: float = 0.0
    step: int = 0
    slots: dict = field(default_factory=dict)  # name -> {buffer name: ndarray}

    def __post_init__(self):
        self.kind = self.kind.lower()
        if self.kind not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.kind!r}; choose from {', '.join(OPTIMIZERS)}")


def _slot(state: OptimizerState, name: str, buf: str, like: np.ndarray) -> np.ndarray:
    slots = state.slots.setdefault(name, {})
    if buf not in slots:
        slots[buf] = np.zeros_like(like)
    elif slots[buf].shape != like.shape:
        raise ValueError(f"optimizer buffer {name}/{buf} has shape {slots[buf].shape}, param {like.shape}")
    return slots[buf]


def optimizer_step(state: OptimizerState, params: dict[str, Tensor], grads: dict) -> dict[str, Tensor]:
    """Apply one update; returns new parameter tensors and advances ``state``.

    ``grads`` maps parameter name to an array or Tensor; parameters without
    a gradient are returned unchanged.
    """
    state.step += 1
    t = state.step
    lr, b1, b2, eps = state.learning_rate, state.beta1, state.beta2, state.epsilon
    out = dict(params)
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        g = np.asarray(g.data if isinstance(g, Tensor) else g, dtype=p.dtype)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        w = p.data
        if state.kind == "sgd":
            if state.momentum:
                vel = _slot(state, name, "velocity", w)
                vel[...] = state.momentum * vel - lr * g
                new = w + vel
            else:
                new = w - lr * g
        elif state.kind == "rmsprop":
            v = _slot(state, name, "v", w)
            v[...] = state.rho * v + (1 - state.rho) * g * g
            new = w - lr * g / (np.sqrt(v) + eps)
        elif state.kind == "adam":
            m, v = _slot(state, name, "m", w), _slot(state, name, "v", w)
            m[...] = b1 * m + (1 - b1) * g
            v[...] = b2 * v + (1 - b2) * g * g
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            new = w - lr * m_hat / (np.sqrt(v_hat) + eps)
        elif state.kind == "adamax":
            m, u = _slot(state, name, "m", w), _slot(state, name, "u", w)
            m[...] = b1 * m + (1 - b1) * g
            u[...] = np.maximum(b2 * u, np.abs(g))
            new = w - (lr / (1 - b1 ** t)) * m / (u + eps)
        else:  # nadam
            m, v = _slot(state, name, "m", w), _slot(state, name, "v", w)
            m[...] = b1 * m + (1 - b1) * g
            v[...] = b2 * v + (1 - b2) * g * g
            m_hat = b1 * m / (1 - b1 ** (t + 1)) + (1 - b1) * g / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            new = w - lr * m_hat / (np.sqrt(v_hat) + eps)
        out[name] = Tensor._wrap(new.astype(p.dtype), requires_grad=p.requires_grad)
    return out


# --------------------------------------------------------------------------
# splitting

def split_dataset(ds: DatasetManifest, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Stratified, seeded train/val/test split.

    Per class, val and test take ``floor(n * fraction)`` shuffled samples
    and train keeps the rest, so classes too small to split fill train first.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ValueError(f"split fractions must be three non-negative numbers summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    parts: list[list[int]] = [[], [], []]
    labels = ds.labels()
    for c in range(ds.num_classes):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        n = idx.size
        n_val = int(np.floor(n * fractions[1] + 1e-9))
        n_test = int(np.floor(n * fractions[2] + 1e-9))
        n_train = n - n_val - n_test
        parts[0] += idx[:n_train].tolist()
        parts[1] += idx[n_train:n_train + n_val].tolist()
        parts[2] += idx[n_train + n_val:].tolist()
    return tuple(ds.subset(sorted(p)) for p in parts)


# --------------------------------------------------------------------------
# training loop

@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 16
    optimizer: str = "adam"
    learning_rate: float = 1e-4
    seed: int = 0
    splits: tuple = (0.8, 0.1, 0.1)
    clip_norm: float | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if abs(sum(self.splits) - 1) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {self.splits}")
        OptimizerState(self.optimizer)  # validates the kind


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float | None
    val_acc: float | None
    seconds: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def loss_and_grads(m: ModelGraph, images: np.ndarray, labels: np.ndarray):
    """Forward + backward for one batch: (loss, probabilities, grads by param name)."""
    params = m.params
    with GradTape() as tape:
        probs = softmax(m.forward(Tensor._wrap(images)), axis=-1)
        loss = cross_entropy(one_hot(labels, probs.shape[-1]), probs)
    grads = backward(loss, tape)
    named = {name: grads[p].data for name, p in params.items() if p in grads}
    return loss.item(), probs.data, named


def _clip_by_global_norm(grads: dict, max_norm: float) -> dict:
    norm = np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if norm <= max_norm or norm == 0:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


def evaluate_loss_acc(m: ModelGraph, ds: DatasetManifest, batch_size: int = 16):
    """Mean loss and accuracy of ``m`` over ``ds`` (no gradient tracking)."""
    if len(ds) == 0:
        return None, None
    total_loss, correct = 0.0, 0
    for start in range(0, len(ds), batch_size):
        idx = range(start, min(start + batch_size, len(ds)))
        y = ds.labels(idx)
        probs = softmax(m.forward(Tensor._wrap(ds.images(idx))), axis=-1)
        total_loss += cross_entropy(one_hot(y, probs.shape[-1]), probs).item() * len(y)
        correct += int((probs.data.argmax(axis=1) == y).sum())
    return total_loss / len(ds), correct / len(ds)


def train_epochs(m: ModelGraph, train: DatasetManifest, cfg: TrainConfig,
                 val: DatasetManifest | None = None, state: OptimizerState | None = None,
                 sink=None) -> Iterator[EpochRecord]:
    """Yield one :class:`EpochRecord` per epoch while updating ``m.params`` in place.

    Batch order for epoch ``e`` comes from ``default_rng([seed, e])``, so a
    run is reproducible whatever the epoch count. ``sink`` (a writable text
    stream) receives each record as a JSON line.
    """
    if len(train) == 0:
        raise ValueError("training set is empty")
    if train.images([0]).shape[1:] != m.input_shape:
        raise ValueError(f"images are {train.images([0]).shape[1:]}, model expects {m.input_shape}")
    state = state or OptimizerState(cfg.optimizer, cfg.learning_rate)
    n = len(train)
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        loss_sum, correct = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            y = train.labels(idx)
            try:
                loss, probs, grads = loss_and_grads(m, train.images(idx), y)
            except (ValueError, OSError) as exc:
                raise type(exc)(f"epoch {epoch}: {exc}") from exc
            if not np.isfinite(loss):
                raise NumericError(f"epoch {epoch}: loss became {loss}")
            if cfg.clip_norm:
                grads = _clip_by_global_norm(grads, cfg.clip_norm)
            m.params = optimizer_step(state, m.params, grads)
            loss_sum += loss * len(idx)
            correct += int((probs.argmax(axis=1) == y).sum())
        val_loss, val_acc = evaluate_loss_acc(m, val, cfg.batch_size) if val is not None else (None, None)
        rec = EpochRecord(epoch, loss_sum / n, correct / n, val_loss, val_acc, time.perf_counter() - t0)
        if sink is not None:
            sink.write(rec.to_json() + "\n")
            sink.flush()
        yield rec


def fit(m: ModelGraph, ds: DatasetManifest, cfg: TrainConfig, sink=None):
    """Split ``ds`` by ``cfg.splits``, train for ``cfg.epochs``; returns (records, model).

    The test split is not touched here; recover it with the same seed via
    :func:`split_dataset`.
    """
    train, val, _ = split_dataset(ds, cfg.splits, cfg.seed)
    records = list(train_epochs(m, train, cfg, val if len(val) else None, sink=sink))
    return records, m
