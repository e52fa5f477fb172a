"""Dense tensors with reverse-mode automatic differentiation.

A `Tensor` wraps a contiguous numpy float array plus an optional gradient.
Each operation that touches a tensor with `requires_grad=True` records a
backward rule; `backward(loss)` walks the recorded graph in reverse
topological order and accumulates gradients into every reachable
`requires_grad` leaf.

Conventions:
  * float32 is the working precision; float64 is available for gradient
    checking, where it keeps the numerical floor well below the tolerances.
  * Gradients accumulate across backward calls; `zero_grad` resets them.
  * The graph is recorded per forward pass and released during backward,
    so calling `backward` twice on the same loss raises.
  * `no_grad()` disables recording, for evaluation-only forward passes.
"""

from __future__ import annotations

import contextlib
import math
from typing import Iterable, Sequence

import numpy as np

from .errors import ShapeError

DEFAULT_DTYPE = np.float32
_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Context manager that disables graph recording."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


class Tensor:
    """An n-dimensional float array, optionally tracked for autodiff."""

    __slots__ = ("values", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, values, requires_grad: bool = False, dtype=None):
        arr = np.asarray(values, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward_fn is None and not self._parents

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.values, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # Operator sugar; scalars are promoted to constant tensors.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(other, scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return multiply(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.zeros_like(t.values)
    t.grad += g


def _track(out_values: np.ndarray, parents: tuple[Tensor, ...]) -> Tensor | None:
    """Return a recording output tensor, or None when recording is off."""
    if _grad_enabled and any(p.requires_grad for p in parents):
        out = Tensor(out_values)
        out.requires_grad = True
        out._parents = parents
        return out
    return None


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `g` down to `shape`, undoing numpy broadcasting."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Arithmetic primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    """Elementwise sum with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    vals = a.values + b.values
    out = _track(vals, (a, b))
    if out is None:
        return Tensor(vals)

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    out._backward_fn = backward_fn
    return out


def multiply(a, b) -> Tensor:
    """Elementwise (Hadamard) product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    vals = a.values * b.values
    out = _track(vals, (a, b))
    if out is None:
        return Tensor(vals)

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.values, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.values, b.shape))

    out._backward_fn = backward_fn
    return out


def scale(a, s: float) -> Tensor:
    """Multiply by a python scalar (dtype-preserving)."""
    a = as_tensor(a)
    s = float(s)
    vals = a.values * s
    out = _track(vals, (a,))
    if out is None:
        return Tensor(vals)

    def backward_fn(g):
        _accumulate(a, g * s)

    out._backward_fn = backward_fn
    return out


def matmul(a, b) -> Tensor:
    """Matrix product.

    Supported shapes: [m,k]@[k,n], batched [..,m,k]@[..,k,n] with identical
    leading dims, and [..,m,k]@[k,n] (shared right operand, as in a linear
    layer applied across a batch).
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul batch dimensions disagree: {a.shape} vs {b.shape}")
    if a.ndim == 2 and b.ndim > 2:
        raise ShapeError(f"matmul does not broadcast a 2-d left operand: {a.shape} vs {b.shape}")
    vals = a.values @ b.values
    out = _track(vals, (a, b))
    if out is None:
        return Tensor(vals)

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, g @ np.swapaxes(b.values, -1, -2))
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                ga = a.values.reshape(-1, a.shape[-1])
                gg = g.reshape(-1, g.shape[-1])
                _accumulate(b, ga.T @ gg)
            else:
                _accumulate(b, np.swapaxes(a.values, -1, -2) @ g)

    out._backward_fn = backward_fn
    return out


# ---------------------------------------------------------------------------
# Shape primitives
# ---------------------------------------------------------------------------

def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    vals = np.transpose(a.values, axes)
    out = _track(vals, (a,))
    if out is None:
        return Tensor(vals)
    inverse = None if axes is None else np.argsort(axes)

    def backward_fn(g):
        _accumulate(a, np.transpose(g, inverse))

    out._backward_fn = backward_fn
    return out


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    vals = a.values.reshape(shape)
    out = _track(vals, (a,))
    if out is None:
        return Tensor(vals)

    def backward_fn(g):
        _accumulate(a, g.reshape(a.shape))

    out._backward_fn = backward_fn
    return out


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat needs at least one tensor")
    vals = np.concatenate([t.values for t in ts], axis=axis)
    out = _track(vals, tuple(ts))
    if out is None:
        return Tensor(vals)
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(int(lo), int(hi))
                _accumulate(t, g[tuple(sl)])

    out._backward_fn = backward_fn
    return out


def index(a, key) -> Tensor:
    """Basic (slice/integer) indexing; each input element is read at most once."""
    a = as_tensor(a)
    vals = a.values[key].copy()
    out = _track(vals, (a,))
    if out is None:
        return Tensor(vals)

    def backward_fn(g):
        full = np.zeros_like(a.values)
        full[key] = g
        _accumulate(a, full)

    out._backward_fn = backward_fn
    return out


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

def _restore_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    vals = a.values.sum(axis=axis, keepdims=keepdims)
    out = _track(vals, (a,))
    if out is None:
        return Tensor(vals)

    def backward_fn(g):
        _accumulate(a, _restore_reduced(g, a.shape, axis, keepdims).astype(a.dtype, copy=False))

    out._backward_fn = backward_fn
    return out


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    vals = a.values.mean(axis=axis, keepdims=keepdims)
    count = a.size if axis is None else a.shape[axis]
    out = _track(vals, (a,))
    if out is None:
        return Tensor(vals)

    def backward_fn(g):
        spread = _restore_reduced(g, a.shape, axis, keepdims) / count
        _accumulate(a, spread.astype(a.dtype, copy=False))

    out._backward_fn = backward_fn
    return out


# ---------------------------------------------------------------------------
# Neural-network primitives
# ---------------------------------------------------------------------------

def _check_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise ShapeError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


def softmax(x, axis: int = -1) -> Tensor:
    """Stable softmax along `axis` (max-subtracted before exponentiation)."""
    x = as_tensor(x)
    axis = _check_axis(axis, x.ndim)
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = _track(s, (x,))
    if out is None:
        return Tensor(s)

    def backward_fn(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        _accumulate(x, (g - inner) * s)

    out._backward_fn = backward_fn
    return out


def log_softmax(x, axis: int = -1) -> Tensor:
    """log(softmax(x)) via the log-sum-exp trick."""
    x = as_tensor(x)
    axis = _check_axis(axis, x.ndim)
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    vals = shifted - lse
    out = _track(vals, (x,))
    if out is None:
        return Tensor(vals)

    def backward_fn(g):
        _accumulate(x, g - np.exp(vals) * g.sum(axis=axis, keepdims=True))

    out._backward_fn = backward_fn
    return out


def layernorm(x, gamma, beta, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0:
        raise ValueError(f"layernorm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layernorm affine shapes {gamma.shape}/{beta.shape} do not match feature dim ({d},)"
        )
    mu = x.values.mean(axis=-1, keepdims=True)
    centered = x.values - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv
    vals = gamma.values * xhat + beta.values
    out = _track(vals, (x, gamma, beta))
    if out is None:
        return Tensor(vals)
    lead = tuple(range(x.ndim - 1))

    def backward_fn(g):
        if gamma.requires_grad:
            _accumulate(gamma, (g * xhat).sum(axis=lead))
        if beta.requires_grad:
            _accumulate(beta, g.sum(axis=lead))
        if x.requires_grad:
            gx = g * gamma.values
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            _accumulate(x, (gx - m1 - xhat * m2) * inv)

    out._backward_fn = backward_fn
    return out


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


def gelu(x) -> Tensor:
    """Gaussian-error linear unit, tanh approximation.

    gelu(x) = 0.5 x (1 + tanh(c (x + a x^3))) with c = sqrt(2/pi), a = 0.044715.
    The tanh form is used (rather than the exact erf form) to stay
    numpy-only; the two agree to ~1e-3 absolute, inside every tolerance
    used here.
    """
    x = as_tensor(x)
    v = x.values
    inner = _GELU_C * (v + _GELU_A * v * v * v)
    t = np.tanh(inner)
    vals = 0.5 * v * (1.0 + t)
    out = _track(vals, (x,))
    if out is None:
        return Tensor(vals)

    def backward_fn(g):
        sech2 = 1.0 - t * t
        local = 0.5 * (1.0 + t) + 0.5 * v * sech2 * _GELU_C * (1.0 + 3.0 * _GELU_A * v * v)
        _accumulate(x, g * local)

    out._backward_fn = backward_fn
    return out


def dropout(x, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: train-time mask scaled by 1/(1-p); identity in eval mode."""
    x = as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout with p > 0 requires an rng")
    keep = (rng.random(x.shape) >= p).astype(x.dtype)
    mask = keep / np.asarray(1.0 - p, dtype=x.dtype)
    vals = x.values * mask
    out = _track(vals, (x,))
    if out is None:
        return Tensor(vals)

    def backward_fn(g):
        _accumulate(x, g * mask)

    out._backward_fn = backward_fn
    return out


def embedding(table, indices) -> Tensor:
    """Row lookup into `table` by an integer index array; rows may repeat."""
    table = as_tensor(table)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ValueError(f"embedding indices must be integers, got dtype {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ValueError(
            f"embedding index out of range [0, {table.shape[0]}): min {idx.min()}, max {idx.max()}"
        )
    vals = table.values[idx]
    out = _track(vals, (table,))
    if out is None:
        return Tensor(vals)

    def backward_fn(g):
        full = np.zeros_like(table.values)
        np.add.at(full, idx, g)
        _accumulate(table, full)

    out._backward_fn = backward_fn
    return out


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss through the recorded graph.

    Gradients accumulate into every reachable `requires_grad` leaf; internal
    nodes are released afterwards, so a second call on the same loss raises.
    """
    if not isinstance(loss, Tensor):
        raise TypeError("backward expects a Tensor")
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._backward_fn is None:
        raise ValueError(
            "backward on a detached loss or an already-released graph; "
            "re-run the forward pass to record a fresh graph"
        )

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))

    loss.grad = np.ones_like(loss.values)
    for node in reversed(topo):
        fn = node._backward_fn
        if fn is not None and node.grad is not None:
            fn(node.grad)
        if fn is not None:
            # Internal node: release the graph edge and its transient grad.
            node._backward_fn = None
            node._parents = ()
            node.grad = None


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
