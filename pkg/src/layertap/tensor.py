"""Reverse-mode automatic differentiation over dense real arrays.

A ``Tensor`` wraps a numpy array and records, for every operation, the
parent tensors and a closure that propagates the output gradient back to
them. ``backward(loss)`` runs the closures in reverse topological order.

Conventions enforced throughout:

* every array is float32 or float64; arithmetic follows numpy promotion,
  so a graph built from float64 leaves runs entirely in 64-bit
* any non-finite value (NaN or Inf) produced by an operation is a hard
  error (``NonFiniteError``) raised at the op that produced it
* a graph is single-use: running ``backward`` a second time over nodes it
  already visited raises ``GraphError``
* gradients accumulate into ``.grad`` only for tensors with
  ``requires_grad=True``; everything else keeps ``grad is None``
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(ArithmeticError):
    """A NaN or Inf appeared in an operation's inputs or outputs."""


class GraphError(RuntimeError):
    """The computation graph was used in an unsupported way."""


DEFAULT_DTYPE = np.float32

_FLOAT_DTYPES = (np.float32, np.float64)

# Tanh-approximation constants for gelu: 0.5*x*(1 + tanh(c*(x + a*x^3)))
_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    # A float64-accumulated sum is finite iff every element is: NaN and Inf
    # both propagate, and finite float32/float64 data at this scale cannot
    # overflow the float64 accumulator. Much cheaper than isfinite().all().
    if not np.isfinite(arr.sum(dtype=np.float64)):
        if np.all(np.isfinite(arr)):  # pathological cancellation-free overflow
            return arr
        raise NonFiniteError(f"non-finite value produced by {op}")
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_grad_fn", "_spent")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        _check_finite(arr, "tensor creation")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable[[], None] | None = None
        self._spent = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    # operator sugar; scalars mean python numbers, not 0-d tensors
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def make_node(
    data: np.ndarray,
    parents: Sequence[Tensor],
    grad_fn: Callable[[Tensor], None] | None,
    op: str,
) -> Tensor:
    """Wrap an op result in a graph node.

    ``grad_fn`` receives the output tensor and must accumulate into each
    requiring parent via ``parent._accumulate``. It is dropped entirely
    when no parent requires gradients, pruning the graph below frozen
    subtrees. Exposed so fused losses outside this module (for example
    the alignment-marginalizing sequence loss) can register custom
    backward rules.
    """
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._spent = False
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._grad_fn = grad_fn and (lambda: grad_fn(out))
    else:
        out.requires_grad = False
        out._parents = ()
        out._grad_fn = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    def grad_fn(out):
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad, b.shape))

    return make_node(a.data + b.data, (a, b), grad_fn, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    def grad_fn(out):
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad, a.shape))
        if b.requires_grad:
            b._accumulate(-_unbroadcast(out.grad, b.shape))

    return make_node(a.data - b.data, (a, b), grad_fn, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    def grad_fn(out):
        if a.requires_grad:
            a._accumulate(_unbroadcast(out.grad * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(out.grad * a.data, b.shape))

    return make_node(a.data * b.data, (a, b), grad_fn, "mul")


def add_scalar(a: Tensor, c: float) -> Tensor:
    c = float(c)  # numpy scalars would promote the array dtype

    def grad_fn(out):
        a._accumulate(out.grad)

    return make_node(a.data + c, (a,), grad_fn, "add_scalar")


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def grad_fn(out):
        a._accumulate(out.grad * c)

    return make_node(a.data * c, (a,), grad_fn, "scale")


# ---------------------------------------------------------------------------
# linear algebra and structure


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} vs {b.shape}")

    def grad_fn(out):
        if a.requires_grad:
            a._accumulate(out.grad @ b.data.T)
        if b.requires_grad:
            b._accumulate(a.data.T @ out.grad)

    return make_node(a.data @ b.data, (a, b), grad_fn, "matmul")


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-d operand, got {a.shape}")

    def grad_fn(out):
        a._accumulate(out.grad.T)

    return make_node(a.data.T.copy(), (a,), grad_fn, "transpose")


def index(a: Tensor, key) -> Tensor:
    """Basic (slice/integer) indexing; fancy indexing is unsupported."""

    def grad_fn(out):
        g = np.zeros_like(a.data)
        g[key] += out.grad
        a._accumulate(g)

    return make_node(np.ascontiguousarray(a.data[key]), (a,), grad_fn, "index")


def reshape(a: Tensor, shape) -> Tensor:
    def grad_fn(out):
        a._accumulate(out.grad.reshape(a.shape))

    return make_node(a.data.reshape(shape).copy(), (a,), grad_fn, "reshape")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def grad_fn(out):
        pieces = np.split(out.grad, bounds, axis=axis)
        for t, g in zip(tensors, pieces):
            if t.requires_grad:
                t._accumulate(g)

    return make_node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), grad_fn, "concat")


def tsum(a: Tensor) -> Tensor:
    """Sum of all entries, as a scalar tensor."""

    def grad_fn(out):
        a._accumulate(np.full_like(a.data, out.grad))

    return make_node(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,), grad_fn, "sum")


def mean_over_time(a: Tensor) -> Tensor:
    """Arithmetic mean across axis 0 of a [T, d] tensor."""
    if a.data.ndim != 2:
        raise ShapeError(f"mean_over_time needs a 2-d [T, d] operand, got {a.shape}")
    steps = a.shape[0]
    if steps == 0:
        raise ShapeError("mean_over_time over an empty sequence")

    def grad_fn(out):
        a._accumulate(np.broadcast_to(out.grad / steps, a.shape).copy())

    return make_node(a.data.mean(axis=0), (a,), grad_fn, "mean_over_time")


def weighted_sum(tensors: Sequence[Tensor], weights: Tensor) -> Tensor:
    """sum_i weights[i] * tensors[i] with all terms sharing one shape."""
    if weights.data.ndim != 1 or len(weights.data) != len(tensors):
        raise ShapeError(
            f"weighted_sum got {len(tensors)} tensors but {weights.data.shape} weights"
        )
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise ShapeError(f"weighted_sum operands disagree: {t.shape} vs {shape}")
    stacked = np.stack([t.data for t in tensors])

    def grad_fn(out):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(out.grad * weights.data[i])
        if weights.requires_grad:
            weights._accumulate(np.tensordot(stacked, out.grad, axes=(tuple(range(1, stacked.ndim)), tuple(range(out.grad.ndim)))))

    return make_node(np.tensordot(weights.data, stacked, axes=1), (*tensors, weights), grad_fn, "weighted_sum")


# ---------------------------------------------------------------------------
# activations


def relu(a: Tensor) -> Tensor:
    def grad_fn(out):
        a._accumulate(out.grad * (a.data > 0))

    return make_node(np.maximum(a.data, 0), (a,), grad_fn, "relu")


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit, tanh approximation.

    0.5*x*(1 + tanh(sqrt(2/pi)*(x + 0.044715*x^3))); the closed-form
    derivative is 0.5*(1+t) + 0.5*x*(1-t^2)*sqrt(2/pi)*(1 + 3*0.044715*x^2)
    with t the inner tanh.
    """
    x = a.data
    t = np.tanh(_GELU_C * (x + _GELU_A * x**3))

    def grad_fn(out):
        local = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * _GELU_C * (1.0 + 3.0 * _GELU_A * x**2)
        a._accumulate(out.grad * local)

    return make_node(0.5 * x * (1.0 + t), (a,), grad_fn, "gelu")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(out):
        dot = (out.grad * y).sum(axis=axis, keepdims=True)
        a._accumulate(y * (out.grad - dot))

    return make_node(y, (a,), grad_fn, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if not -a.data.ndim <= axis < a.data.ndim:
        raise ShapeError(f"log_softmax axis {axis} invalid for shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def grad_fn(out):
        a._accumulate(out.grad - np.exp(y) * out.grad.sum(axis=axis, keepdims=True))

    return make_node(y, (a,), grad_fn, "log_softmax")


# ---------------------------------------------------------------------------
# normalization and losses


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis: (x - mean)/sqrt(var + eps) * gamma + beta."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm params must match last dim {d}, got {gamma.shape} and {beta.shape}"
        )
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv

    def grad_fn(out):
        g = out.grad
        if beta.requires_grad:
            beta._accumulate(g.reshape(-1, d).sum(axis=0))
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            gx = g * gamma.data
            m1 = gx.mean(axis=-1, keepdims=True)
            m2 = (gx * xhat).mean(axis=-1, keepdims=True)
            x._accumulate((gx - m1 - xhat * m2) * inv)

    return make_node(xhat * gamma.data + beta.data, (x, gamma, beta), grad_fn, "layer_norm")


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """-log_softmax(logits)[label] for a 1-d logit vector."""
    if logits.data.ndim != 1:
        raise ShapeError(f"cross_entropy expects 1-d logits, got {logits.shape}")
    n = logits.shape[0]
    if not 0 <= label < n:
        raise ValueError(f"label {label} out of range for {n} classes")
    shifted = logits.data - logits.data.max()
    logz = np.log(np.exp(shifted).sum())
    loss = logz - shifted[label]

    def grad_fn(out):
        p = np.exp(shifted - logz)
        p[label] -= 1.0
        logits._accumulate(out.grad * p)

    return make_node(np.asarray(loss, dtype=logits.data.dtype), (logits,), grad_fn, "cross_entropy")


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requiring leaf reachable from ``loss``.

    The traversal visits each node exactly once; re-running it over a
    graph that has already been consumed raises ``GraphError``.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires gradients")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        if node._grad_fn is None:
            continue  # leaves carry no backward rule and are reusable
        if node._spent:
            raise GraphError("stale graph: backward was already run over these nodes")
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        node._spent = True
        node._grad_fn()
        if node is not loss:
            node.grad = None  # intermediate buffers are not retained
