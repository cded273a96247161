"""Reverse-mode automatic differentiation on dense numpy arrays.

Define-by-run tape engine: each primitive computes its forward value eagerly
and records a vector-Jacobian closure on the output node. ``Tape.trace``
linearizes the subgraph reachable from an output in topological order;
``backward`` replays it exactly once in reverse. The graph is rebuilt on every
forward pass, so the recorded structure always matches the executed control
flow.

Storage is float64 throughout. Non-finite values are rejected at graph
boundaries and after every primitive, naming the primitive that produced
them. Analytic gradients are validated against central finite differences via
``finite_diff_check``.
"""

from __future__ import annotations

import contextlib
import logging
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)

DTYPE = np.float64


class AutodiffError(Exception):
    pass


class ShapeMismatch(AutodiffError):
    """Operands cannot be combined; message names the op and both shapes."""


class NonFiniteValue(AutodiffError):
    """A NaN or Inf appeared at a graph boundary or inside a primitive."""


_grad_enabled = True
_degenerate_rows = 0  # fully-masked softmax rows seen since last reset


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (forward values only)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def degenerate_softmax_rows() -> int:
    return _degenerate_rows


def reset_degenerate_softmax_rows() -> None:
    global _degenerate_rows
    _degenerate_rows = 0


def _check_finite(data: np.ndarray, op: str) -> None:
    # Cheap probe first: a non-finite element makes the sum non-finite.
    # The full scan only runs to rule out benign overflow of the sum itself.
    with np.errstate(over="ignore", invalid="ignore"):
        probe = data.sum()
    if not np.isfinite(probe) and not np.isfinite(data).all():
        raise NonFiniteValue(f"non-finite value produced by '{op}'")


class Tensor:
    """Dense float64 array node in the autodiff graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(),
                 _vjp=None, _op: str = "tensor"):
        arr = np.asarray(data, dtype=DTYPE)
        _check_finite(arr, _op)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._vjp = _vjp
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self, seed=None) -> None:
        if seed is None:
            seed = np.ones_like(self.data)
        seed = np.asarray(seed, dtype=DTYPE)
        if seed.shape != self.data.shape:
            raise ShapeMismatch(
                f"backward seed shape {seed.shape} != output shape {self.data.shape}")
        Tape.trace(self).backward(seed)

    # -- operator sugar ----------------------------------------------------

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def __repr__(self):
        return f"Tensor(op={self._op}, shape={self.data.shape}, grad={self.requires_grad})"


class Tape:
    """Ordered record of the nodes reachable from one output.

    ``backward`` visits each node exactly once, in reverse topological order,
    accumulating parent gradients through the recorded closures.
    """

    def __init__(self, nodes: list):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Tape":
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
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)

    def backward(self, seed: np.ndarray) -> None:
        root = self.nodes[-1]
        root.grad = seed if root.grad is None else root.grad + seed
        for node in reversed(self.nodes):
            if node._vjp is not None and node.grad is not None:
                node._vjp(node.grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def param(x) -> Tensor:
    """Leaf tensor that accumulates gradient."""
    return Tensor(x, requires_grad=True)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad and t._vjp is None:
        return
    g = _unbroadcast(np.asarray(g, dtype=DTYPE), t.data.shape)
    t.grad = g if t.grad is None else t.grad + g


def _make(data: np.ndarray, op: str, parents: tuple, vjp) -> Tensor:
    if _grad_enabled and any(p.requires_grad or p._vjp is not None for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _vjp=vjp, _op=op)
    return Tensor(data, _op=op)


def _broadcast_check(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.data.shape, b.data.shape)
    except ValueError:
        raise ShapeMismatch(
            f"{op}: operand shapes {a.data.shape} and {b.data.shape} do not broadcast"
        ) from None


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "add")
    out = _make(a.data + b.data, "add", (a, b), None)
    if out.requires_grad:
        def vjp(g):
            _accum(a, g)
            _accum(b, g)
        out._vjp = vjp
    return out


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "sub")
    out = _make(a.data - b.data, "sub", (a, b), None)
    if out.requires_grad:
        def vjp(g):
            _accum(a, g)
            _accum(b, -g)
        out._vjp = vjp
    return out


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "mul")
    out = _make(a.data * b.data, "mul", (a, b), None)
    if out.requires_grad:
        def vjp(g):
            _accum(a, g * b.data)
            _accum(b, g * a.data)
        out._vjp = vjp
    return out


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check(a, b, "div")
    out = _make(a.data / b.data, "div", (a, b), None)
    if out.requires_grad:
        def vjp(g):
            _accum(a, g / b.data)
            _accum(b, -g * a.data / (b.data * b.data))
        out._vjp = vjp
    return out


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = _make(-a.data, "neg", (a,), None)
    if out.requires_grad:
        out._vjp = lambda g: _accum(a, -g)
    return out


def power(a, p) -> Tensor:
    """Elementwise power with a constant (non-differentiated) exponent."""
    a = as_tensor(a)
    p = float(p)
    out = _make(a.data ** p, "power", (a,), None)
    if out.requires_grad:
        out._vjp = lambda g: _accum(a, g * p * a.data ** (p - 1.0))
    return out


def sqrt(a) -> Tensor:
    return power(a, 0.5)


# -- matmul ------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.data.shape[-1] != b.data.shape[-2]:
        raise ShapeMismatch(
            f"matmul: operand shapes {a.data.shape} and {b.data.shape} are incompatible")
    out = _make(a.data @ b.data, "matmul", (a, b), None)
    if out.requires_grad:
        def vjp(g):
            _accum(a, g @ np.swapaxes(b.data, -1, -2))
            _accum(b, np.swapaxes(a.data, -1, -2) @ g)
        out._vjp = vjp
    return out


# -- transcendental ----------------------------------------------------------

def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        data = np.exp(a.data)
    out = _make(data, "exp", (a,), None)
    if out.requires_grad:
        out._vjp = lambda g: _accum(a, g * out.data)
    return out


def tlog(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)
    out = _make(data, "log", (a,), None)
    if out.requires_grad:
        out._vjp = lambda g: _accum(a, g / a.data)
    return out


def _sigmoid(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _make(_sigmoid(a.data), "sigmoid", (a,), None)
    if out.requires_grad:
        out._vjp = lambda g: _accum(a, g * out.data * (1.0 - out.data))
    return out


def softplus(a) -> Tensor:
    """log(1 + e^x), computed stably; strictly positive for x > -745."""
    a = as_tensor(a)
    out = _make(np.logaddexp(0.0, a.data), "softplus", (a,), None)
    if out.requires_grad:
        out._vjp = lambda g: _accum(a, g * _sigmoid(a.data))
    return out


def silu(a) -> Tensor:
    """x * sigmoid(x)."""
    a = as_tensor(a)
    s = _sigmoid(a.data)
    out = _make(a.data * s, "silu", (a,), None)
    if out.requires_grad:
        out._vjp = lambda g: _accum(a, g * s * (1.0 + a.data * (1.0 - s)))
    return out


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = _make(np.maximum(a.data, 0.0), "relu", (a,), None)
    if out.requires_grad:
        out._vjp = lambda g: _accum(a, g * (a.data > 0.0))
    return out


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = _make(np.tanh(a.data), "tanh", (a,), None)
    if out.requires_grad:
        out._vjp = lambda g: _accum(a, g * (1.0 - out.data * out.data))
    return out


# -- softmax -----------------------------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)
    out = _make(s, "softmax", (a,), None)
    if out.requires_grad:
        def vjp(g):
            gs = g * s
            _accum(a, gs - s * gs.sum(axis=axis, keepdims=True))
        out._vjp = vjp
    return out


def masked_softmax(a, mask: np.ndarray, axis: int = -1) -> Tensor:
    """Softmax restricted to positions where ``mask`` is True.

    Rows with every position masked produce all-zero weights (no attention)
    rather than NaN; such rows are counted and reported via
    ``degenerate_softmax_rows``.
    """
    global _degenerate_rows
    a = as_tensor(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.data.shape)
    neg = np.where(mask, a.data, -np.inf)
    rowmax = neg.max(axis=axis, keepdims=True)
    dead = ~np.isfinite(rowmax)
    if dead.any():
        n = int(dead.sum())
        _degenerate_rows += n
        log.warning("masked_softmax: %d fully-masked rows produced zero weights", n)
    safe_max = np.where(dead, 0.0, rowmax)
    shifted = np.where(mask, a.data - safe_max, 0.0)   # <= 0 where kept
    e = np.where(mask, np.exp(shifted), 0.0)
    denom = e.sum(axis=axis, keepdims=True)
    s = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0.0)
    out = _make(s, "masked_softmax", (a,), None)
    if out.requires_grad:
        def vjp(g):
            gs = g * s
            _accum(a, gs - s * gs.sum(axis=axis, keepdims=True))
        out._vjp = vjp
    return out


# -- reductions / shape ops ---------------------------------------------------

def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = _make(a.data.sum(axis=axis, keepdims=keepdims), "sum", (a,), None)
    if out.requires_grad:
        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.data.shape))
        out._vjp = vjp
    return out


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = _make(a.data.mean(axis=axis, keepdims=keepdims), "mean", (a,), None)
    if out.requires_grad:
        count = a.data.size / out.data.size
        def vjp(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(g, a.data.shape) / count)
        out._vjp = vjp
    return out


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = _make(a.data.reshape(shape), "reshape", (a,), None)
    if out.requires_grad:
        out._vjp = lambda g: _accum(a, g.reshape(a.data.shape))
    return out


def swapaxes(a, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    out = _make(np.swapaxes(a.data, ax1, ax2), "swapaxes", (a,), None)
    if out.requires_grad:
        out._vjp = lambda g: _accum(a, np.swapaxes(g, ax1, ax2))
    return out


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeMismatch(
            f"broadcast: shape {a.data.shape} does not broadcast to {shape}") from None
    out = _make(np.ascontiguousarray(data), "broadcast", (a,), None)
    if out.requires_grad:
        out._vjp = lambda g: _accum(a, g)  # _accum reduces to a's shape
    return out


def getitem(a, idx) -> Tensor:
    """Basic (slice / integer / ellipsis) indexing."""
    a = as_tensor(a)
    out = _make(a.data[idx], "slice", (a,), None)
    if out.requires_grad:
        def vjp(g):
            buf = np.zeros_like(a.data)
            buf[idx] = g
            _accum(a, buf)
        out._vjp = vjp
    return out


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        shapes = [t.data.shape for t in ts]
        raise ShapeMismatch(f"concat: incompatible shapes {shapes}") from None
    out = _make(data, "concat", tuple(ts), None)
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in ts]
        offsets = np.cumsum([0] + sizes)
        def vjp(g):
            for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                _accum(t, g[tuple(sl)])
        out._vjp = vjp
    return out


def stack(tensors: Sequence, axis: int = -1) -> Tensor:
    """Stack along a new axis (reshape + concat composite)."""
    ts = [as_tensor(t) for t in tensors]
    ax = axis if axis >= 0 else ts[0].ndim + 1 + axis
    expanded = [reshape(t, t.data.shape[:ax] + (1,) + t.data.shape[ax:]) for t in ts]
    return concat(expanded, axis=ax)


# -- normalization composites -------------------------------------------------

def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    x = as_tensor(x)
    mu = tmean(x, axis=-1, keepdims=True)
    xc = sub(x, mu)
    var = tmean(mul(xc, xc), axis=-1, keepdims=True)
    inv = power(add(var, eps), -0.5)
    return add(mul(mul(xc, inv), gamma), beta)


def rms_norm(x, gamma, eps: float = 1e-5) -> Tensor:
    """Scale by the reciprocal root-mean-square over the last axis."""
    x = as_tensor(x)
    ms = tmean(mul(x, x), axis=-1, keepdims=True)
    inv = power(add(ms, eps), -0.5)
    return mul(mul(x, inv), gamma)


def causal_conv1d(x, w, b) -> Tensor:
    """Depthwise causal 1-D convolution over the time axis.

    x: (..., T, C); w: (C, K); b: (C,). Output t depends on inputs t-K+1..t
    (left zero padding), independently per channel.
    """
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    T = x.data.shape[-2]
    C = x.data.shape[-1]
    if w.data.ndim != 2 or w.data.shape[0] != C:
        raise ShapeMismatch(
            f"causal_conv1d: weight shape {w.data.shape} does not match {C} channels")
    K = w.data.shape[1]
    pad = Tensor(np.zeros(x.data.shape[:-2] + (K - 1, C)))
    xp = concat([pad, x], axis=-2)
    out = None
    for i in range(K):
        tap = mul(getitem(xp, (Ellipsis, slice(i, i + T), slice(None))), getitem(w, (slice(None), i)))
        out = tap if out is None else add(out, tap)
    return add(out, b)


# -- verification -------------------------------------------------------------

def forward_backward(graph: Callable, inputs: Sequence[np.ndarray], seed=1.0):
    """Evaluate ``graph`` on leaf tensors and backpropagate ``seed``.

    ``graph`` maps leaf Tensors to a scalar loss Tensor (optionally a tuple
    whose first element is the loss). Returns (outputs, gradients) where
    gradients align with ``inputs`` (zeros for unused leaves).
    """
    leaves = [param(np.asarray(x, dtype=DTYPE)) for x in inputs]
    result = graph(*leaves)
    if isinstance(result, tuple):
        loss, outputs = result[0], tuple(r.data.copy() for r in result)
    else:
        loss, outputs = result, result.data.copy()
    if loss.data.size != 1:
        raise ShapeMismatch(f"loss must be scalar, got shape {loss.data.shape}")
    loss.backward(np.full_like(loss.data, float(np.asarray(seed))))
    grads = [lf.grad if lf.grad is not None else np.zeros_like(lf.data) for lf in leaves]
    return outputs, grads


def finite_diff_check(graph: Callable, inputs: Sequence[np.ndarray],
                      step: float = 1e-6) -> float:
    """Max relative error between analytic and central-difference gradients.

    Relative error per element: |analytic - central| / max(1, |central|).
    ``graph`` must be deterministic (fix any sampling noise before calling).
    """
    if not 1e-8 <= step <= 1e-4:
        raise ValueError(f"step {step} outside [1e-8, 1e-4]")
    work = [np.array(x, dtype=DTYPE) for x in inputs]
    _, grads = forward_backward(graph, work)

    def evaluate() -> float:
        with no_grad():
            result = graph(*[Tensor(w) for w in work])
        loss = result[0] if isinstance(result, tuple) else result
        return float(loss.data)

    worst = 0.0
    for arr, grad in zip(work, grads):
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            hi = evaluate()
            flat[j] = orig - step
            lo = evaluate()
            flat[j] = orig
            central = (hi - lo) / (2.0 * step)
            rel = abs(gflat[j] - central) / max(1.0, abs(central))
            if rel > worst:
                worst = rel
    return worst
