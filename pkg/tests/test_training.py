import io
import json
import math

import numpy as np
import pytest

from plantxvit.data import DatasetManifest, ImageSample, synth_dataset
from plantxvit.model import PlantXViTConfig, build_model
from plantxvit.tensor import Tensor, softmax
from plantxvit.training import (OPTIMIZERS, NumericError, OptimizerState, TrainConfig, cross_entropy, fit,
                                loss_and_grads, one_hot, optimizer_step, split_dataset, train_epochs)


def ce(t, p):
    return cross_entropy(np.asarray(t, dtype=np.float32), Tensor(np.asarray(p, dtype=np.float32))).item()


# -- loss ------------------------------------------------------------------------------

def test_cross_entropy_examples():
    perfect = ce([[0, 1, 0, 0]], [[0, 1, 0, 0]])
    assert 0 <= perfect <= 1e-6
    uniform = ce([[0, 0, 1, 0]], [[0.25] * 4])
    assert abs(uniform - math.log(4)) < 1e-6
    both = ce([[0, 1, 0, 0], [0, 0, 1, 0]], [[0, 1, 0, 0], [0.25] * 4])
    assert abs(both - (perfect + uniform) / 2) < 1e-6


def test_cross_entropy_shape_mismatch():
    with pytest.raises(ValueError):
        ce([[1, 0]], [[0.5, 0.25, 0.25]])


def test_softmax_cross_entropy_gradient_is_p_minus_y(rng):
    from plantxvit.tensor import GradTape, backward
    logits = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    y = one_hot([0, 3, 1], 4).astype(np.float64)
    with GradTape() as tape:
        loss = cross_entropy(y, softmax(logits))
    g = backward(loss, tape)[logits].data
    p = np.exp(logits.data) / np.exp(logits.data).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(g, (p - y) / 3, atol=1e-12)


# -- optimizers -------------------------------------------------------------------------

def step(kind, p, g, **kw):
    state = OptimizerState(kind, **kw)
    out = optimizer_step(state, {"w": Tensor(np.asarray(p, dtype=np.float64))}, {"w": np.asarray(g, dtype=np.float64)})
    return out["w"].data, state


def test_sgd_example():
    assert step("sgd", [1.0], [0.5], learning_rate=0.1)[0][0] == pytest.approx(0.95, abs=1e-15)


def test_adam_first_step():
    p, _ = step("adam", [0.0], [1.0], learning_rate=1e-4)
    assert p[0] == pytest.approx(-1e-4 / (1 + 1e-7), rel=1e-12)


@pytest.mark.parametrize("kind", OPTIMIZERS)
def test_zero_lr_is_identity(kind, rng):
    p0 = rng.standard_normal(5)
    p, _ = step(kind, p0, rng.standard_normal(5), learning_rate=0.0)
    assert p.tobytes() == p0.tobytes()


@pytest.mark.parametrize("kind", OPTIMIZERS)
def test_zero_gradient_is_a_fixed_point(kind, rng):
    p0 = rng.standard_normal(4)
    p, _ = step(kind, p0, np.zeros(4), learning_rate=1e-3)
    np.testing.assert_array_equal(p, p0)


def scalar_oracle(kind, grads, lr, b1=0.9, b2=0.999, rho=0.9, eps=1e-7):
    """Plain-float reference for a sequence of gradients on one scalar parameter."""
    p, m, v, u = 0.0, 0.0, 0.0, 0.0
    for t, g in enumerate(grads, start=1):
        if kind == "sgd":
            p -= lr * g
        elif kind == "rmsprop":
            v = rho * v + (1 - rho) * g * g
            p -= lr * g / (math.sqrt(v) + eps)
        elif kind == "adam":
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            p -= lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        elif kind == "adamax":
            m = b1 * m + (1 - b1) * g
            u = max(b2 * u, abs(g))
            p -= lr / (1 - b1 ** t) * m / (u + eps)
        else:
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            nesterov = b1 * m / (1 - b1 ** (t + 1)) + (1 - b1) * g / (1 - b1 ** t)
            p -= lr * nesterov / (math.sqrt(v / (1 - b2 ** t)) + eps)
    return p


@pytest.mark.parametrize("kind", OPTIMIZERS)
def test_multi_step_matches_scalar_oracle(kind):
    grads = [0.3, -1.2, 0.05, 2.0, -0.7]
    state = OptimizerState(kind, learning_rate=0.01)
    params = {"w": Tensor(np.zeros(1))}
    for g in grads:
        params = optimizer_step(state, params, {"w": np.array([g])})
    assert params["w"].data[0] == pytest.approx(scalar_oracle(kind, grads, 0.01), rel=1e-12, abs=1e-15)
    assert state.step == len(grads)


def test_sgd_momentum():
    state = OptimizerState("sgd", learning_rate=0.1, momentum=0.9)
    params = {"w": Tensor(np.array([1.0]))}
    for _ in range(2):
        params = optimizer_step(state, params, {"w": np.array([1.0])})
    # v1 = -0.1, v2 = -0.19
    assert params["w"].data[0] == pytest.approx(1 - 0.1 - 0.19)


@pytest.mark.parametrize("kind", ["adam", "nadam", "adamax"])
def test_adaptive_steps_ignore_gradient_scale(kind, rng):
    g = rng.uniform(0.01, 1, size=8) * rng.choice([-1, 1], size=8)
    p0 = rng.standard_normal(8)
    a, _ = step(kind, p0, g, learning_rate=1e-3)
    b, _ = step(kind, p0, 10 * g, learning_rate=1e-3)
    da, db = a - p0, b - p0
    cos = da @ db / (np.linalg.norm(da) * np.linalg.norm(db))
    assert 1 - cos < 1e-3
    assert 0.99 <= np.linalg.norm(db) / np.linalg.norm(da) <= 1.01


def test_unknown_optimizer():
    with pytest.raises(ValueError, match="unknown optimizer"):
        OptimizerState("lbfgs")


def test_gradient_shape_mismatch():
    with pytest.raises(ValueError):
        optimizer_step(OptimizerState("sgd"), {"w": Tensor(np.zeros(3))}, {"w": np.zeros(2)})


# -- splitting ---------------------------------------------------------------------------

def labelled(counts):
    samples = [ImageSample(Tensor(np.zeros((2, 2, 3))), c, f"{c}:{i}")
               for c, n in enumerate(counts) for i in range(n)]
    return DatasetManifest(samples, [f"c{c}" for c in range(len(counts))])


def test_split_sizes_and_determinism():
    ds = labelled([50, 50])
    tr, va, te = split_dataset(ds, (0.8, 0.1, 0.1), seed=3)
    assert (len(tr), len(va), len(te)) == (80, 10, 10)
    again = split_dataset(ds, (0.8, 0.1, 0.1), seed=3)
    assert [s.source for s in again[1].samples] == [s.source for s in va.samples]


def test_split_is_stratified():
    tr, va, te = split_dataset(labelled([10, 10]), (0.8, 0.1, 0.1), seed=0)
    assert tr.counts == [8, 8] and va.counts == [1, 1] and te.counts == [1, 1]


def test_split_partitions_input():
    ds = labelled([7, 3, 12])
    parts = split_dataset(ds, (0.6, 0.2, 0.2), seed=1)
    sources = [s.source for p in parts for s in p.samples]
    assert sorted(sources) == sorted(s.source for s in ds.samples)
    assert len(set(sources)) == len(sources)


def test_tiny_class_fills_train_first():
    tr, va, te = split_dataset(labelled([2, 20]), (0.8, 0.1, 0.1), seed=0)
    assert tr.counts[0] == 2 and va.counts[0] == 0 and te.counts[0] == 0


def test_bad_fractions():
    with pytest.raises(ValueError):
        split_dataset(labelled([4]), (0.5, 0.2, 0.2))


# -- loop ------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_set():
    return synth_dataset(2, 4, 16, seed=1)


def small_model(seed=0):
    return build_model(PlantXViTConfig(input_size=16, num_classes=2, patch_size=2, seed=seed,
                                       transformer_depth=1))


def test_zero_lr_keeps_parameters_and_loss(small_set):
    m = small_model()
    before = {k: v.data.copy() for k, v in m.params.items()}
    cfg = TrainConfig(epochs=2, batch_size=4, learning_rate=0.0, splits=(1, 0, 0))
    records, m = fit(m, small_set, cfg)
    assert all(np.array_equal(before[k], m.params[k].data) for k in before)
    assert records[0].train_loss == pytest.approx(records[1].train_loss, rel=1e-6)


def test_same_seed_same_records(small_set):
    cfg = TrainConfig(epochs=2, batch_size=4, learning_rate=1e-3, splits=(0.5, 0.5, 0.0), seed=4)
    sink = io.StringIO()
    r1, _ = fit(small_model(), small_set, cfg, sink=sink)
    r2, _ = fit(small_model(), small_set, cfg)
    strip = lambda rs: [(r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc) for r in rs]
    assert strip(r1) == strip(r2)
    lines = [json.loads(line) for line in sink.getvalue().splitlines()]
    assert [line["epoch"] for line in lines] == [0, 1]
    assert all(line["train_loss"] >= 0 and 0 <= line["train_acc"] <= 1 for line in lines)


def test_small_sgd_step_does_not_increase_loss(small_set):
    m = small_model(seed=2)
    x, y = small_set.images(range(4)), small_set.labels(range(4))
    loss0, _, grads = loss_and_grads(m, x, y)
    m.params = optimizer_step(OptimizerState("sgd", learning_rate=1e-6), m.params, grads)
    loss1, _, _ = loss_and_grads(m, x, y)
    assert loss1 <= loss0


def test_nan_loss_raises_numeric_error(small_set):
    m = small_model()
    m.params["output/bias"] = Tensor(np.array([np.nan, 0.0], np.float32), requires_grad=True)
    with pytest.raises(NumericError):
        next(train_epochs(m, small_set, TrainConfig(epochs=1, batch_size=4)))


def test_wrong_image_size_rejected(small_set):
    m = build_model(PlantXViTConfig(input_size=32, num_classes=2, patch_size=2))
    with pytest.raises(ValueError):
        next(train_epochs(m, small_set, TrainConfig(epochs=1)))


def test_clip_norm_bounds_update(small_set):
    m = small_model()
    before = {k: v.data.copy() for k, v in m.params.items()}
    cfg = TrainConfig(epochs=1, batch_size=8, optimizer="sgd", learning_rate=1.0, clip_norm=1e-3,
                      splits=(1, 0, 0))
    fit(m, small_set, cfg)
    delta = np.sqrt(sum(((m.params[k].data - before[k]).astype(np.float64) ** 2).sum() for k in before))
    assert delta <= 1e-3 * (1 + 1e-4)
