"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation takes and returns :class:`Tensor` objects. When any input
requires a gradient (and recording is enabled) the output keeps references to
its parents plus a closure mapping the upstream gradient to one gradient per
parent. :meth:`Tensor.backward` walks the recorded graph once in reverse
topological order and frees it afterwards.
"""

from __future__ import annotations

import contextlib
import os
import threading
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_state = threading.local()
_debug = os.environ.get("MIMLAB_DEBUG", "") not in ("", "0")


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class GraphError(RuntimeError):
    """Raised when backward is called on something that has no graph."""


def set_debug(enabled: bool) -> None:
    """Toggle finiteness assertions after every operation."""
    global _debug
    _debug = bool(enabled)


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (thread-local)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- introspection ----------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff ---------------------------------------------------------
    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar root, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("root does not require grad (detached or built under no_grad)")

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None
                node.requires_grad = False

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


def _not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    if _debug and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by a tensor operation")
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == DTYPE else data.astype(DTYPE)
    out.grad = None
    out.name = None
    needs = grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return _result(a.data ** p, (a,), backward)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor); the gradient is zero where the floor is active."""
    a = as_tensor(a)
    keep = a.data > floor
    return _result(np.where(keep, a.data, floor), (a,), lambda g: (g * keep,))


def where(cond, a, b) -> Tensor:
    """Select from ``a`` where ``cond`` is true, else from ``b`` (cond is not differentiable)."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = unbroadcast(np.where(cond, g, 0.0), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.where(cond, 0.0, g), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(np.where(cond, a.data, b.data), (a, b), backward)


def gelu(x) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the erf form of the normal CDF."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data / _SQRT2))

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _result(x.data * cdf, (x,), backward)


# -- reductions and shape ---------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(out)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _result(np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(a.data.transpose(axes))
    return _result(out, (a,), lambda g: (g.transpose(inv),))


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    out = np.broadcast_to(a.data, shape).copy()
    return _result(out, (a,), lambda g: (unbroadcast(g, a.shape),))


def _has_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    if isinstance(index, Tensor):
        raise TypeError("index with numpy arrays, not tensors")
    out = a.data[index]
    advanced = _has_advanced(index)

    def backward(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return _result(np.array(out, dtype=DTYPE, copy=True), (a,), backward)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def backward(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(out, tensors, backward)


def stop_gradient(a) -> Tensor:
    return as_tensor(a).detach()


# -- linear algebra ---------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs 2-d or higher operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    if b.ndim == 2 and a.ndim > 2:
        # fold leading axes into one GEMM
        k, n = b.shape
        out = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (n,))

        def backward(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a.data.reshape(-1, k).T @ g2 if b.requires_grad else None
            return ga, gb

        return _result(out, (a, b), backward)

    out = a.data @ b.data

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with weight stored as [in, out]."""
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# -- normalization ----------------------------------------------------------

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    (ax,) = _norm_axis(axis, x.ndim)
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=ax, keepdims=True)),)

    return _result(out, (x,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    (ax,) = _norm_axis(axis, x.ndim)
    shifted = x.data - x.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=ax, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=ax, keepdims=True),)

    return _result(out, (x,), backward)


def logsumexp(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    (ax,) = _norm_axis(axis, x.ndim)
    m = x.data.max(axis=ax, keepdims=True)
    s = np.exp(x.data - m).sum(axis=ax, keepdims=True)
    out = np.log(s) + m
    weights = np.exp(x.data - out)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (g * weights,)

    return _result(out if keepdims else out.squeeze(ax), (x,), backward)


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis with the biased variance, then scale and shift."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        gg = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gb = g.sum(axis=lead) if beta.requires_grad else None
        return gx, gg, gb

    return _result(out, (x, gamma, beta), backward)


# -- gradient checking -----------------------------------------------------

def grad_check(
    f: Callable[..., Tensor],
    point: Sequence,
    eps: float = 1e-5,
    tol: float | None = None,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Compare backprop gradients of a scalar function with central differences.

    Args:
        f: maps tensors (one per entry of ``point``) to a scalar tensor.
        point: arrays or tensors at which to differentiate.
        eps: finite-difference step, in [1e-7, 1e-3].
        tol: if given, raise AssertionError when the error exceeds it.
        max_coords: check at most this many randomly chosen coordinates per input.
        rng: generator for coordinate sampling.

    Returns:
        max over checked coordinates of |analytic - numeric| / max(1, |analytic|).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps {eps} outside [1e-7, 1e-3]")
    base = [np.array(as_tensor(p).data, dtype=DTYPE, copy=True) for p in point]
    leaves = [Tensor(arr.copy(), requires_grad=True) for arr in base]
    root = f(*leaves)
    root.backward()
    analytic = [lf.grad if lf.grad is not None else np.zeros_like(lf.data) for lf in leaves]

    rng = rng or np.random.default_rng(0)

    def evaluate(i, flat_idx, delta):
        args = [Tensor(arr) for arr in base]
        arr = base[i].copy()
        arr.reshape(-1)[flat_idx] += delta
        args[i] = Tensor(arr)
        with no_grad():
            return f(*args).item()

    worst = 0.0
    for i, arr in enumerate(base):
        coords = np.arange(arr.size)
        if max_coords is not None and arr.size > max_coords:
            coords = rng.choice(arr.size, size=max_coords, replace=False)
        flat_grad = analytic[i].reshape(-1)
        for j in coords:
            numeric = (evaluate(i, j, eps) - evaluate(i, j, -eps)) / (2.0 * eps)
            err = abs(flat_grad[j] - numeric) / max(1.0, abs(flat_grad[j]))
            worst = max(worst, err)
    if tol is not None and worst > tol:
        raise AssertionError(f"gradient check failed: max relative error {worst:.3e} > {tol:.1e}")
    return worst
