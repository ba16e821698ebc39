"""Dense tensors with reverse-mode differentiation.

Values are numpy arrays (float64 by default, float32 opt-in for training) and
every operation records a backward closure, so calling ``backward()`` on a
scalar accumulates exact partial derivatives into ``.grad`` of every tensor
that requires them. ``grad_check`` verifies any scalar-valued function against
central differences.

Sequence features throughout the package use column layout: a stack of L
tokens of width d is a (d, L) matrix, optionally with leading batch axes.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import (
    ConfigError,
    ContractError,
    DegenerateInputError,
    DimensionError,
    NumericError,
)

DEFAULT_DTYPE = np.float64

# Every op output is checked for NaN/Inf; a violation is an error state.
CHECK_FINITE = True

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Skip graph construction inside the block (evaluation / numeric probes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check_finite(arr: np.ndarray) -> None:
    if CHECK_FINITE and not np.isfinite(arr).all():
        raise NumericError("non-finite value encountered in tensor data")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        _check_finite(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward_fn = None

    # -- introspection -------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), requires_grad=False, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ------------------------------------------------------------

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable requires_grad tensor.

        ``self`` must be a scalar; repeated calls keep accumulating.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        flowing: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = flowing.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward_fn is None:
                continue
            for parent, pg in zip(node._parents, node._backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = flowing.get(id(parent))
                flowing[id(parent)] = pg if prev is None else prev + pg

    # -- operator sugar ------------------------------------------------------

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return _op(-self.data, (self,), lambda g: (-g,))

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)


# -- graph plumbing ----------------------------------------------------------


def _op(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    _check_finite(data)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype if dtype is not None else DEFAULT_DTYPE))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcast gradient back down to the originating shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    squeeze = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if squeeze:
        grad = grad.sum(axis=squeeze, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic --------------------------------------------------


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, dtype=a.dtype)
    with np.errstate(over="ignore"):
        data = a.data + b.data
    return _op(
        data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, dtype=a.dtype)
    with np.errstate(over="ignore"):
        data = a.data - b.data
    return _op(
        data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)),
    )


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, dtype=a.dtype)
    with np.errstate(over="ignore", invalid="ignore"):
        data = a.data * b.data
    return _op(
        data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def div(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, dtype=a.dtype)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data / b.data
    return _op(
        data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def texp(x) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(over="ignore"):
        y = np.exp(x.data)
    return _op(y, (x,), lambda g: (g * y,))


def tlog(x) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(x.data)
    return _op(y, (x,), lambda g: (g / x.data,))


def tsqrt(x) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(invalid="ignore"):
        y = np.sqrt(x.data)
    return _op(y, (x,), lambda g: (g * 0.5 / y,))


def ttanh(x) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)
    return _op(y, (x,), lambda g: (g * (1.0 - y * y),))


# -- reductions --------------------------------------------------------------


def _expand_reduced(g: np.ndarray, src_shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        axes = tuple(range(len(src_shape)))
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        axes = tuple(a % len(src_shape) for a in axes)
    if not keepdims:
        kept = list(g.shape)
        for a in sorted(axes):
            kept.insert(a, 1)
        g = g.reshape(kept)
    return np.broadcast_to(g, src_shape)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    data = x.data.sum(axis=axis, keepdims=keepdims)
    data = np.asarray(data)
    return _op(data, (x,), lambda g: (_expand_reduced(g, x.data.shape, axis, keepdims),))


def tmean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    if axis is None:
        count = x.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for a in axes:
            count *= x.data.shape[a]
    return tsum(x, axis=axis, keepdims=keepdims) * (1.0 / count)


# -- shape manipulation ------------------------------------------------------


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    src = x.data.shape
    return _op(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def swapaxes(x, a: int, b: int) -> Tensor:
    x = _as_tensor(x)
    return _op(x.data.swapaxes(a, b), (x,), lambda g: (g.swapaxes(a, b),))


def transpose(x, axes) -> Tensor:
    x = _as_tensor(x)
    inverse = tuple(np.argsort(axes))
    return _op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def broadcast_to(x, shape) -> Tensor:
    x = _as_tensor(x)
    src = x.data.shape
    return _op(np.broadcast_to(x.data, shape), (x,), lambda g: (_unbroadcast(g, src),))


def concat(tensors, axis: int = -1) -> Tensor:
    parts = [_as_tensor(t) for t in tensors]
    if not parts:
        raise DimensionError("concat needs at least one tensor")
    data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return _op(data, tuple(parts), bw)


def gather(x, indices, axis: int) -> Tensor:
    """Select slices along one axis by an integer index array (cross-product indexing)."""
    x = _as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    ax = axis % x.data.ndim
    data = np.take(x.data, idx, axis=ax)
    src_shape = x.data.shape

    def bw(g):
        gx = np.zeros(src_shape, dtype=g.dtype)
        np.add.at(gx, (slice(None),) * ax + (idx,), g)
        return (gx,)

    return _op(data, (x,), bw)


def take_along_last(x, indices) -> Tensor:
    """Per-row selection along the last axis: indices has x.ndim dims and broadcasts
    against x on all axes but the last (x carries the full leading shape)."""
    x = _as_tensor(x)
    idx = np.asarray(indices, dtype=np.intp)
    if idx.ndim != x.data.ndim:
        raise DimensionError("take_along_last needs indices with the same rank as x")
    if np.broadcast_shapes(x.data.shape[:-1], idx.shape[:-1]) != x.data.shape[:-1]:
        raise DimensionError(
            f"take_along_last indices {idx.shape} would broadcast x {x.data.shape}"
        )
    data = np.take_along_axis(x.data, idx, axis=-1)
    src_shape = x.data.shape

    def bw(g):
        gx = np.zeros(src_shape, dtype=g.dtype)
        idx_full = np.broadcast_to(idx, g.shape)
        last = src_shape[-1]
        lead = int(np.prod(src_shape[:-1], dtype=np.int64))
        offsets = np.arange(lead, dtype=np.intp).reshape(g.shape[:-1] + (1,)) * last
        np.add.at(gx.reshape(-1), (idx_full + offsets).reshape(-1), g.reshape(-1))
        return (gx,)

    return _op(data, (x,), bw)


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with optional broadcast leading batch axes.

    Gradients: dA = dC @ Bᵀ, dB = Aᵀ @ dC (summed over broadcast axes).
    """
    a = _as_tensor(a)
    b = _as_tensor(b, dtype=a.dtype)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError("matmul operands must have at least 2 dimensions")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(
            f"matmul inner dimensions differ: {a.data.shape} vs {b.data.shape}"
        )
    try:
        data = a.data @ b.data
    except ValueError as exc:
        raise DimensionError(f"matmul batch axes incompatible: {a.data.shape} vs {b.data.shape}") from exc

    def bw(g):
        ga = _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape)
        gb = _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape)
        return ga, gb

    return _op(data, (a, b), bw)


# -- normalisations ----------------------------------------------------------


def _check_axis(x: Tensor, axis: int, op_name: str) -> int:
    if x.data.ndim == 0:
        raise DimensionError(f"{op_name} needs at least one axis, got a scalar")
    ax = axis % x.data.ndim
    if x.data.shape[ax] == 0:
        raise DimensionError(f"{op_name} over an empty axis (shape {x.data.shape})")
    return ax


def softmax(x, axis: int = -1) -> Tensor:
    """Max-stabilised softmax along one axis; outputs are positive and sum to 1."""
    x = _as_tensor(x)
    ax = _check_axis(x, axis, "softmax")
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=ax, keepdims=True)

    def bw(g):
        inner = (g * y).sum(axis=ax, keepdims=True)
        return ((g - inner) * y,)

    return _op(y, (x,), bw)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    ax = _check_axis(x, axis, "log_softmax")
    m = x.data.max(axis=ax, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=ax, keepdims=True)) + m
    y = x.data - lse

    def bw(g):
        return (g - np.exp(y) * g.sum(axis=ax, keepdims=True),)

    return _op(y, (x,), bw)


def layer_norm(x, gamma, beta, eps: float = 1e-5, axis: int = -1) -> Tensor:
    """Normalise to zero mean / unit variance along ``axis``, then apply affine."""
    x = _as_tensor(x)
    _check_axis(x, axis, "layer_norm")
    gamma = _as_tensor(gamma, dtype=x.dtype)
    beta = _as_tensor(beta, dtype=x.dtype)
    mu = tmean(x, axis=axis, keepdims=True)
    centered = x - mu
    var = tmean(centered * centered, axis=axis, keepdims=True)
    return gamma * (centered / tsqrt(var + eps)) + beta


def l2_normalize(x, axis: int = -1) -> Tensor:
    """Scale rows (slices along ``axis``) to unit Euclidean norm."""
    x = _as_tensor(x)
    _check_axis(x, axis, "l2_normalize")
    sq = tsum(x * x, axis=axis, keepdims=True)
    if not np.all(sq.data > 0.0):
        raise DegenerateInputError("l2_normalize received a zero-norm row")
    return x / tsqrt(sq)


# -- stochastic ops ----------------------------------------------------------


def dropout(x, rate: float, rng: np.random.Generator, training: bool = True) -> Tensor:
    """Seeded inverted-dropout mask; identity when rate is 0 or training is off."""
    x = _as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    mask = (rng.random(x.data.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return _op(x.data * mask, (x,), lambda g: (g * mask,))


# -- verification ------------------------------------------------------------


def grad_check(f, x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between the analytic gradient of scalar ``f`` at ``x``
    and central differences with step ``h``.

    Per coordinate: |analytic − numeric| / (|analytic| + |numeric| + 1e−12).
    """
    if not isinstance(x, Tensor) or not x.requires_grad:
        raise ContractError("grad_check needs a requires_grad Tensor input")
    if not x.data.flags["C_CONTIGUOUS"]:
        # the probe below perturbs a flat view in place
        x.data = np.ascontiguousarray(x.data)
    x.zero_grad()
    out = f(x)
    if not isinstance(out, Tensor) or out.data.size != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    out.backward()
    if x.grad is None:
        analytic = np.zeros_like(x.data, dtype=np.float64)
    else:
        analytic = np.asarray(x.grad, dtype=np.float64).copy()
    x.zero_grad()

    numeric = np.zeros(x.data.shape, dtype=np.float64).reshape(-1)
    flat = x.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        with no_grad():
            hi = float(f(x).data.reshape(()))
        flat[i] = orig - h
        with no_grad():
            lo = float(f(x).data.reshape(()))
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * h)
    numeric = numeric.reshape(x.data.shape)

    err = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-12)
    return float(err.max()) if err.size else 0.0


def sgd_step(params, lr: float) -> None:
    """In-place gradient descent on every (name, tensor) pair; clears grads."""
    for _, p in params:
        if p.requires_grad and p.grad is not None:
            p.data -= lr * p.grad
            p.grad = None
