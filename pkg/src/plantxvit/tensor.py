"""Dense tensors with tape-based reverse-mode differentiation.

Every array computation in the package goes through :class:`Tensor` and the
primitive ops defined here (or registered with :func:`apply` by other
modules). Operations executed while a :class:`GradTape` is active are
recorded in execution order, which is already a topological order, so
:func:`backward` only has to walk the record list in reverse.

Production tensors are float32. The gradient checker re-runs ops in float64.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32
_FLOAT_TYPES = (np.float32, np.float64)
_MAX_ELEMENTS = 2**40

_local = threading.local()


def _tape_stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class Tensor:
    """Immutable n-dimensional float array with an optional gradient flag."""

    __slots__ = ("data", "requires_grad")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            src = np.asarray(data)
            dtype = src.dtype if src.dtype in _FLOAT_TYPES else DEFAULT_DTYPE
        arr = np.array(data, dtype=dtype, copy=True)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        # internal constructor: takes ownership of a freshly computed array
        t = cls.__new__(cls)
        if arr.dtype not in _FLOAT_TYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = requires_grad
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("only single-element tensors convert to a Python scalar")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data, requires_grad=self.requires_grad, dtype=dtype)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar; all of these route through the recorded primitives
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    """Return ``x`` unchanged if it is a Tensor, else a constant in ``like``'s dtype."""
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


class GradTape:
    """Records primitive ops executed inside its ``with`` block.

    A tape belongs to one forward/backward pass on one thread. Nested tapes
    are allowed; ops record on the innermost one only.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._outputs: set[int] = set()

    def __enter__(self) -> "GradTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self._records)

    def _record(self, out: Tensor, inputs: tuple[Tensor, ...], fn: Callable) -> None:
        self._records.append((out, inputs, fn))
        self._outputs.add(id(out))

    def recorded(self, t: Tensor) -> bool:
        return id(t) in self._outputs

    def gradient(self, root: Tensor) -> dict[Tensor, Tensor]:
        return backward(root, self)


def active_tape() -> GradTape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


def apply(data: np.ndarray, inputs: Sequence[Tensor], grad_fn: Callable) -> Tensor:
    """Wrap a primitive's forward result and record it on the active tape.

    ``grad_fn(g)`` receives the output gradient and returns one entry per
    input: an ndarray shaped like that input, or ``None`` when the input
    does not need a gradient (``input.requires_grad`` is false).
    """
    tape = active_tape()
    inputs = tuple(inputs)
    track = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(np.asarray(data), requires_grad=track)
    if track:
        tape._record(out, inputs, grad_fn)
    return out


def backward(root: Tensor, tape: GradTape) -> dict[Tensor, Tensor]:
    """Reverse sweep from a scalar ``root`` over ``tape``.

    Returns a dict (keyed by tensor identity) holding the gradient of every
    tracked tensor that ``root`` depends on, intermediates included.
    Gradients from multiple uses of a tensor are summed.
    """
    if root.size != 1:
        raise ValueError(f"backward root must be a scalar, got shape {list(root.shape)}")
    if not tape.recorded(root):
        raise ValueError("backward root was not produced under this tape")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    owners: dict[int, Tensor] = {id(root): root}
    for out, inputs, fn in reversed(tape._records):
        g = grads.get(id(out))
        if g is None:
            continue
        for t, gi in zip(inputs, fn(g)):
            if gi is None or not t.requires_grad:
                continue
            gi = np.asarray(gi, dtype=t.dtype)
            if gi.shape != t.shape:
                raise RuntimeError(f"gradient shape {gi.shape} does not match tensor {t.shape}")
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                owners[key] = t
    return {owners[k]: Tensor._wrap(np.asarray(v)) for k, v in grads.items()}


# --------------------------------------------------------------------------
# construction

def tensor_new(shape, init: str = "zeros", *, value: float = 0.0, low: float = 0.0,
               high: float = 1.0, fan_in: int | None = None, std: float = 1.0,
               seed: int | None = None, dtype=DEFAULT_DTYPE,
               requires_grad: bool = False) -> Tensor:
    """Allocate a tensor.

    ``init`` is one of ``zeros``, ``constant`` (uses ``value``), ``uniform``
    (``low``/``high``), ``he_uniform`` (limit ``sqrt(6 / fan_in)``) or
    ``normal`` (mean 0, ``std``). Random fills require ``seed`` and are
    reproducible from it.
    """
    shape = tuple(int(d) for d in shape)
    if not shape:
        raise ValueError("shape must have at least one dimension")
    if any(d < 1 for d in shape):
        raise ValueError(f"all dimensions must be >= 1, got {list(shape)}")
    n = 1
    for d in shape:
        n *= d
        if n > _MAX_ELEMENTS:
            raise OverflowError(f"shape {list(shape)} exceeds {_MAX_ELEMENTS} elements")
    if init == "zeros":
        arr = np.zeros(shape, dtype=dtype)
    elif init == "constant":
        arr = np.full(shape, value, dtype=dtype)
    elif init in ("uniform", "he_uniform", "normal"):
        if seed is None:
            raise ValueError(f"init '{init}' needs a seed")
        rng = np.random.default_rng(np.uint64(seed & (2**64 - 1)))
        if init == "uniform":
            arr = rng.uniform(low, high, size=shape)
        elif init == "he_uniform":
            if not fan_in or fan_in < 1:
                raise ValueError("he_uniform needs a positive fan_in")
            limit = np.sqrt(6.0 / fan_in)
            arr = rng.uniform(-limit, limit, size=shape)
        else:
            arr = rng.normal(0.0, std, size=shape)
        arr = arr.astype(dtype)
    else:
        raise ValueError(f"unknown init '{init}'")
    return Tensor._wrap(arr, requires_grad=requires_grad)


# --------------------------------------------------------------------------
# elementwise and structural primitives

def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)

    def grad_fn(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return apply(a.data + b.data, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)

    def grad_fn(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return apply(a.data - b.data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)

    def grad_fn(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return apply(a.data * b.data, (a, b), grad_fn)


def div(a, b) -> Tensor:
    a = as_tensor(a, b if isinstance(b, Tensor) else None)
    b = as_tensor(b, a)

    def grad_fn(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return apply(a.data / b.data, (a, b), grad_fn)


def neg(a: Tensor) -> Tensor:
    return apply(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return apply(out, (a,), lambda g: (g * out,))


def log(a: Tensor, floor: float = 1e-30) -> Tensor:
    """Natural log with inputs clamped below at ``floor`` (no -inf)."""
    x = np.maximum(a.data, floor)
    return apply(np.log(x), (a,), lambda g: (np.where(a.data > floor, g / x, 0.0),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    Rank-2 operands give the plain product. Higher-rank operands must carry
    identical leading (batch) dimensions.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {list(a.shape)} @ {list(b.shape)}")
    if a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul batch dimensions differ: {list(a.shape)} @ {list(b.shape)}")

    def grad_fn(g):
        ga = g @ np.swapaxes(b.data, -1, -2) if a.requires_grad else None
        gb = np.swapaxes(a.data, -1, -2) @ g if b.requires_grad else None
        return ga, gb

    return apply(a.data @ b.data, (a, b), grad_fn)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return apply(np.asarray(out), (a,), grad_fn)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return tsum(a, axis=axes, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return apply(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return apply(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = tuple(tensors)
    ax = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def grad_fn(g):
        parts = np.split(g, bounds, axis=ax)
        return tuple(p if t.requires_grad else None for p, t in zip(parts, tensors))

    return apply(np.concatenate([t.data for t in tensors], axis=ax), tensors, grad_fn)


def take(a: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing; fancy indexing is not supported."""
    out = a.data[index]

    def grad_fn(g):
        full = np.zeros(a.shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return apply(np.array(out), (a,), grad_fn)


# --------------------------------------------------------------------------
# activations and normalisation

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return apply(np.where(mask, x.data, 0).astype(x.dtype), (x,),
                 lambda g: (g * mask,))


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``0.5 * x * (1 + erf(x / sqrt(2)))``."""
    d = x.data
    cdf = 0.5 * (1.0 + erf(d / np.sqrt(2.0)))
    out = (d * cdf).astype(x.dtype)

    def grad_fn(g):
        pdf = np.exp(-0.5 * d * d) / np.sqrt(2.0 * np.pi)
        return ((g * (cdf + d * pdf)).astype(x.dtype),)

    return apply(out, (x,), grad_fn)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return apply(s, (x,), grad_fn)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Standardise over the last axis, then scale by ``gamma`` and shift by ``beta``.

    ``eps`` is added to the variance inside the square root. A row with zero
    variance and ``eps == 0`` normalises to zeros instead of NaN.
    """
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ValueError(f"gamma/beta must have shape [{n}], got {list(gamma.shape)}, {list(beta.shape)}")
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    centered = d - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    std = np.sqrt(var + eps)
    inv = np.divide(1.0, std, out=np.zeros_like(std), where=std > 0)
    xhat = centered * inv
    out = xhat * gamma.data + beta.data

    def grad_fn(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        return gx, gg, gb

    return apply(out.astype(x.dtype), (x, gamma, beta), grad_fn)


# --------------------------------------------------------------------------
# gradient checking

def grad_check(fn: Callable[..., Tensor], inputs: Sequence, eps: float = 1e-4,
               dtype=np.float64, seed: int = 0, wrt: Sequence[int] | None = None) -> float:
    """Compare tape gradients of ``fn`` with central differences.

    The numeric derivative uses the fourth-order central stencil
    ``(8[f(x+h) - f(x-h)] - [f(x+2h) - f(x-2h)]) / 12h``; its truncation
    error is O(h^4), so a comparatively wide step keeps round-off small.

    ``fn`` maps Tensors to a Tensor of any shape; its output is contracted
    with a fixed random tensor so every output element contributes. The
    analytic pass runs in ``dtype``; the numeric pass always runs in
    float64. Returns ``max |a - n| / max(|a|, |n|, 1e-8)`` over all checked
    elements. ``wrt`` limits checking to the given input positions.
    """
    base = [np.array(t.data if isinstance(t, Tensor) else t, dtype=np.float64) for t in inputs]
    wrt = range(len(base)) if wrt is None else wrt
    wrt = set(wrt)

    probe = fn(*[Tensor(x) for x in base])
    proj = np.random.default_rng(seed).standard_normal(probe.shape)

    leaves = [Tensor(x, requires_grad=i in wrt, dtype=dtype) for i, x in enumerate(base)]
    with GradTape() as tape:
        out = fn(*leaves)
        root = tsum(out * Tensor(proj, dtype=dtype))
    grads = backward(root, tape)

    def f(arrs):
        val = fn(*[Tensor(a) for a in arrs])
        return float(np.sum(val.data.astype(np.float64) * proj))

    worst = 0.0
    for i in sorted(wrt):
        g = grads.get(leaves[i])
        analytic = np.zeros(base[i].shape) if g is None else g.data.astype(np.float64)
        for j in np.ndindex(base[i].shape):
            arrs = [a.copy() for a in base]
            x0 = base[i][j]
            vals = []
            for k in (1, -1, 2, -2):
                arrs[i][j] = x0 + k * eps
                vals.append(f(arrs))
            numeric = (8 * (vals[0] - vals[1]) - (vals[2] - vals[3])) / (12 * eps)
            a = analytic[j]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
