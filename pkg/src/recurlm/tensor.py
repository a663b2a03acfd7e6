"""Dense n-dimensional tensors with reverse-mode automatic differentiation.

Everything else in this package is built on this module. Design points:

- numpy holds the data; the autodiff graph is recorded here, define-by-run,
  with one backward closure per op (micrograd style, but vectorized).
- float64 by default so gradient checks can run at tight tolerances;
  float32 is opt-in via tensor dtypes / model config.
- graphs are retained per step and freed when the last reference drops;
  there is no checkpointing or rematerialization.
- recording can be suspended with `no_grad()` (thread-local flag), which
  also makes finite-difference loss evaluations cheap.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

DEFAULT_DTYPE = np.float64

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that suspends graph recording on the current thread."""

    def __enter__(self):
        self._prev = grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A numpy array plus an optional autodiff tape entry.

    `data` is always a floating array. Integer payloads (token ids, gather
    indices) stay plain numpy arrays; they are not differentiable.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_grad_owned")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            raise TypeError("wrap raw array data, not another Tensor")
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self._grad_owned = False
        # leaf flag; recording of ops (not leaves) is what no_grad suspends
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _fail_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    # -- graph plumbing ------------------------------------------------------

    def _accum(self, g: np.ndarray):
        # First contribution is held by reference (backward rules hand over
        # fresh arrays); later contributions allocate once, never mutating a
        # buffer another node may still reference.
        if self.grad is None:
            self.grad = g
            self._grad_owned = False
        elif self._grad_owned:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._grad_owned = True

    def backward(self):
        """Reverse-mode sweep from a scalar. Gradients accumulate into `.grad`.

        Accumulates on top of any existing gradients, so backward over a sum
        of independently recorded forwards equals the sum of their backwards.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {self.data.shape}")
        if not self.requires_grad:
            raise ValueError("backward on a tensor that does not require grad")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward_fn is not None:
                node._backward_fn(node.grad)

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_coerce(other, self.dtype), -1.0))

    def __rsub__(self, other):
        return add(_coerce(other, self.dtype), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        if not isinstance(p, (int, float)):
            raise TypeError("only scalar exponents are supported")
        return power(self, float(p))

    def __getitem__(self, key):
        return index(self, key)

    # -- method sugar ----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return tmax(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sigmoid(self):
        return sigmoid(self)

    def tanh(self):
        return tanh(self)

    def relu(self):
        return relu(self)

    def square(self):
        return square(self)

    def sqrt(self):
        return sqrt(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def softmax(self, axis=-1):
        return softmax(self, axis)


def _fail_scalar(t):
    raise ValueError(f"item() requires a single-element tensor, got shape {t.shape}")


def _coerce(x, dtype) -> Tensor:
    """Wrap a python number / array as a constant tensor matching `dtype`."""
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _record(data: np.ndarray, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


# -- primitive ops -------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", DEFAULT_DTYPE))
    b = _coerce(b, a.dtype)
    data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g, b.shape))

    return _record(data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", DEFAULT_DTYPE))
    b = _coerce(b, a.dtype)
    data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(g * a.data, b.shape))

    return _record(data, (a, b), bwd)


def div(a, b) -> Tensor:
    a = _coerce(a, getattr(b, "dtype", DEFAULT_DTYPE))
    b = _coerce(b, a.dtype)
    data = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            a._accum(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accum(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _record(data, (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    data = np.matmul(a.data, b.data)

    def bwd(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accum(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                # weight applied over stacked rows: one flat GEMM instead of a
                # batched product followed by a reduction
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
            b._accum(gb)

    return _record(data, (a, b), bwd)


def power(a: Tensor, p: float) -> Tensor:
    data = a.data**p

    def bwd(g):
        if a.requires_grad:
            a._accum(g * p * a.data ** (p - 1.0))

    return _record(data, (a,), bwd)


def square(a: Tensor) -> Tensor:
    data = a.data * a.data

    def bwd(g):
        if a.requires_grad:
            a._accum(g * 2.0 * a.data)

    return _record(data, (a,), bwd)


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise ValueError("sqrt of negative value")
    data = np.sqrt(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accum(g / (2.0 * data))

    return _record(data, (a,), bwd)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accum(g * data)

    return _record(data, (a,), bwd)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log of non-positive value")
    data = np.log(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accum(g / a.data)

    return _record(data, (a,), bwd)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    data = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    data = data.astype(x.dtype, copy=False)

    def bwd(g):
        if a.requires_grad:
            a._accum(g * data * (1.0 - data))

    return _record(data, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accum(g * (1.0 - data * data))

    return _record(data, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def bwd(g):
        if a.requires_grad:
            a._accum(g * (a.data > 0))

    return _record(data, (a,), bwd)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if a.requires_grad:
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            a._accum(np.broadcast_to(gg, a.shape))

    return _record(data, (a,), bwd)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    data = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.data.size if axis is None else int(np.prod([a.shape[ax] for ax in _axes_tuple(axis, a.ndim)]))

    def bwd(g):
        if a.requires_grad:
            gg = g / n
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            a._accum(np.broadcast_to(gg, a.shape))

    return _record(data, (a,), bwd)


def _axes_tuple(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        return (axis % ndim,)
    return tuple(ax % ndim for ax in axis)


def tmax(a: Tensor, axis=None, keepdims=False) -> Tensor:
    data = a.data.max(axis=axis, keepdims=keepdims)

    def bwd(g):
        if a.requires_grad:
            ref = data if (keepdims or axis is None) else np.expand_dims(data, axis)
            mask = (a.data == ref).astype(a.dtype)
            # ties split the gradient evenly
            counts = mask.sum(axis=axis, keepdims=True) if axis is not None else mask.sum()
            gg = g
            if axis is not None and not keepdims:
                gg = np.expand_dims(gg, axis)
            a._accum(mask / counts * gg)

    return _record(data, (a,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def bwd(g):
        if a.requires_grad:
            a._accum(g.reshape(a.shape))

    return _record(data, (a,), bwd)


def transpose(a: Tensor, axes=None) -> Tensor:
    data = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def bwd(g):
        if a.requires_grad:
            a._accum(np.transpose(g, inv))

    return _record(data, (a,), bwd)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accum(g[tuple(sl)])

    return _record(data, tuple(tensors), bwd)


def index(a: Tensor, key) -> Tensor:
    """Basic (slice / int / ellipsis) indexing. For integer-array lookups use take()."""
    parts = key if isinstance(key, tuple) else (key,)
    if any(isinstance(k, (list, np.ndarray)) for k in parts):
        raise TypeError("integer-array indexing is not differentiable here; use take()")
    data = a.data[key]

    def bwd(g):
        if a.requires_grad:
            g_full = np.zeros_like(a.data)
            g_full[key] = g
            a._accum(g_full)

    return _record(data, (a,), bwd)


def take(a: Tensor, idx, axis: int = 0) -> Tensor:
    """Gather along `axis` with an integer index array.

    Multi-dimensional `idx` is supported only on axis 0 (the embedding case).
    """
    idx = np.asarray(idx)
    if idx.ndim > 1 and axis != 0:
        raise ValueError("multi-dimensional take indices are only supported on axis 0")
    data = np.take(a.data, idx, axis=axis)

    def bwd(g):
        if a.requires_grad:
            g_full = np.zeros_like(a.data)
            if axis == 0:
                np.add.at(g_full, idx, g)
            else:
                gm = np.moveaxis(g_full, axis, 0)
                np.add.at(gm, idx, np.moveaxis(g, axis, 0))
            a._accum(g_full)

    return _record(data, (a,), bwd)


def scatter_rows(base: Tensor, rows: Tensor, idx, axis: int = 1) -> Tensor:
    """Return `base` with the slices at positions `idx` (along `axis`) replaced by `rows`.

    The adjoint routes gradient at `idx` to `rows` and everything else to `base`;
    this is the write-back primitive for sequence buffers.
    """
    idx = np.asarray(idx)
    if idx.ndim != 1:
        raise ValueError("scatter_rows expects a 1-d index array")
    if len(np.unique(idx)) != len(idx):
        raise ValueError("scatter_rows indices must be unique")
    data = base.data.copy()
    dm = np.moveaxis(data, axis, 0)
    dm[idx] = np.moveaxis(rows.data, axis, 0)

    def bwd(g):
        if base.requires_grad:
            gb = g.copy()
            gbm = np.moveaxis(gb, axis, 0)
            gbm[idx] = 0.0
            base._accum(gb)
        if rows.requires_grad:
            gr = np.take(g, idx, axis=axis)
            rows._accum(gr)

    return _record(data, (base, rows), bwd)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        if a.requires_grad:
            dot = (g * data).sum(axis=axis, keepdims=True)
            a._accum((g - dot) * data)

    return _record(data, (a,), bwd)


def cross_entropy(logits: Tensor, targets, reduction: str = "mean") -> Tensor:
    """Cross-entropy (nats) against integer targets over the last axis.

    `targets` is a plain integer array shaped like `logits` minus the class
    axis. `reduction` is ``mean``, ``sum`` or ``none``.
    """
    targets = np.asarray(targets)
    if targets.shape != logits.shape[:-1]:
        raise ValueError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    vocab = logits.shape[-1]
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        bad = int(np.argmax((targets < 0) | (targets >= vocab)))
        raise ValueError(f"target id out of range [0, {vocab}) at flat position {bad}")
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    e = np.exp(x - m)
    z = e.sum(axis=-1, keepdims=True)
    probs = e / z
    lse = (m + np.log(z)).squeeze(-1)
    picked = np.take_along_axis(x, targets[..., None], axis=-1).squeeze(-1)
    losses = lse - picked

    if reduction == "none":
        data = losses
    elif reduction == "sum":
        data = losses.sum()
    elif reduction == "mean":
        data = losses.mean()
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def bwd(g):
        if logits.requires_grad:
            d = probs.copy()
            np.subtract.at(d, (*np.indices(targets.shape), targets), 1.0)
            if reduction == "none":
                d *= np.asarray(g)[..., None]
            elif reduction == "sum":
                d *= g
            else:
                d *= g / targets.size
            logits._accum(d)

    return _record(np.asarray(data), (logits,), bwd)


# -- verification --------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Per-parameter max relative error of autodiff vs central differences."""

    step: float
    tol: float
    per_param: dict = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.per_param.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tol

    def __str__(self):
        lines = [f"grad check: step={self.step:g} tol={self.tol:g} -> {'PASS' if self.passed else 'FAIL'}"]
        for name, err in sorted(self.per_param.items(), key=lambda kv: -kv[1]):
            lines.append(f"  {name:<30s} max rel err {err:.3e}")
        return "\n".join(lines)


def grad_check(f, params, step: float = 1e-4, tol: float = 1e-3, floor: float = 1e-6) -> GradCheckReport:
    """Compare autodiff gradients of the scalar `f()` against central differences.

    `params` maps names to tensors that `f` closes over. Every element of
    every parameter is perturbed by +/- `step`; relative error uses
    ``|ad - fd| / max(|ad|, |fd|, floor)`` so near-zero gradients are judged
    on absolute error at the floor scale.
    """
    params = dict(params)
    for p in params.values():
        p.zero_grad()
    loss = f()
    if loss.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {loss.shape}")
    loss.backward()

    report = GradCheckReport(step=step, tol=tol)
    for name, p in params.items():
        ad = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        fd = np.zeros_like(p.data)
        with no_grad():
            for ix in np.ndindex(p.data.shape):
                orig = p.data[ix]
                p.data[ix] = orig + step
                up = f().item()
                p.data[ix] = orig - step
                down = f().item()
                p.data[ix] = orig
                fd[ix] = (up - down) / (2.0 * step)
        if not np.all(np.isfinite(fd)) or not np.all(np.isfinite(ad)):
            raise FloatingPointError(f"non-finite values while checking parameter {name!r}")
        denom = np.maximum(np.maximum(np.abs(ad), np.abs(fd)), floor)
        report.per_param[name] = float(np.max(np.abs(ad - fd) / denom)) if p.data.size else 0.0
    return report
