"""Reverse-mode automatic differentiation on dense float64 numpy arrays.

A :class:`Node` wraps a value and remembers how it was computed; calling
:func:`backward` on a scalar node walks the tape in reverse topological
order and accumulates gradients into every reachable node.  The primitive
set is deliberately small: elementwise arithmetic, a handful of
activations, 2-D matmul, reductions, and a few shape/index movers that the
models in this package need.  All math is float64 end to end.

Gradients are held on the nodes themselves (``node.grad``).  Within one
backward pass contributions accumulate additively, so a parameter used in
several places receives the sum of its local gradients.  ``backward``
resets the gradients of the subgraph it touches before accumulating, which
keeps repeated passes independent.

Use :func:`no_grad` around inference code: nodes created inside the block
carry no parents and no closures, so graph construction cost drops to the
cost of the forward numpy calls.
"""

from __future__ import annotations

import json
from contextlib import contextmanager

import numpy as np

from .errors import ContractError, DimensionError

# Names of every differentiable primitive defined in this package (the
# spline basis op registers itself from splines.py).  Tests iterate this
# list to make sure each primitive has a finite-difference check.
PRIMITIVE_OPS: list[str] = []


def _primitive(fn):
    PRIMITIVE_OPS.append(fn.__name__)
    return fn


_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Node:
    """A value on the tape.

    value : float64 ndarray (scalars are 0-d arrays)
    grad  : same-shape ndarray after a backward pass, else None
    """

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar -------------------------------------------------
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

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)


def as_node(x) -> Node:
    """Lift plain arrays/scalars to constant nodes; pass nodes through."""
    return x if isinstance(x, Node) else Node(x)


def param(value, name: str | None = None) -> Node:
    """A trainable leaf."""
    return Node(np.array(value, dtype=np.float64, copy=True), requires_grad=True, name=name)


def make_node(value, parents, backward_fn) -> Node:
    """Assemble an op result; record the closure only when the tape is live.

    ``backward_fn(g)`` must return one gradient per parent (or None for
    parents that do not require grad), each already matching the parent's
    shape.
    """
    if _grad_enabled and any(p.requires_grad for p in parents):
        out = Node(value, requires_grad=True)
        out._parents = tuple(parents)
        out._backward = backward_fn
        return out
    return Node(value)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape` (reverses numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------


@_primitive
def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    def bw(g):
        return (
            _unbroadcast(g, a.value.shape) if a.requires_grad else None,
            _unbroadcast(g, b.value.shape) if b.requires_grad else None,
        )
    return make_node(a.value + b.value, (a, b), bw)


@_primitive
def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    def bw(g):
        return (
            _unbroadcast(g, a.value.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.value.shape) if b.requires_grad else None,
        )
    return make_node(a.value - b.value, (a, b), bw)


@_primitive
def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    def bw(g):
        return (
            _unbroadcast(g * b.value, a.value.shape) if a.requires_grad else None,
            _unbroadcast(g * a.value, b.value.shape) if b.requires_grad else None,
        )
    return make_node(a.value * b.value, (a, b), bw)


@_primitive
def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    def bw(g):
        return (
            _unbroadcast(g / b.value, a.value.shape) if a.requires_grad else None,
            _unbroadcast(-g * a.value / (b.value * b.value), b.value.shape)
            if b.requires_grad
            else None,
        )
    return make_node(a.value / b.value, (a, b), bw)


@_primitive
def neg(a) -> Node:
    a = as_node(a)
    def bw(g):
        return (-g,)
    return make_node(-a.value, (a,), bw)


@_primitive
def pow_const(a, exponent: float) -> Node:
    """a ** c for a constant exponent c."""
    a = as_node(a)
    c = float(exponent)
    def bw(g):
        return (g * c * a.value ** (c - 1.0),)
    return make_node(a.value ** c, (a,), bw)


# ---------------------------------------------------------------------
# activations and pointwise transcendentals
# ---------------------------------------------------------------------


@_primitive
def exp(a) -> Node:
    a = as_node(a)
    out_val = np.exp(a.value)
    def bw(g):
        return (g * out_val,)
    return make_node(out_val, (a,), bw)


@_primitive
def log(a) -> Node:
    a = as_node(a)
    def bw(g):
        return (g / a.value,)
    return make_node(np.log(a.value), (a,), bw)


@_primitive
def relu(a) -> Node:
    a = as_node(a)
    mask = a.value > 0.0
    def bw(g):
        return (g * mask,)
    return make_node(np.where(mask, a.value, 0.0), (a,), bw)


@_primitive
def sigmoid(a) -> Node:
    a = as_node(a)
    out_val = 0.5 * (np.tanh(0.5 * a.value) + 1.0)  # stable logistic
    def bw(g):
        return (g * out_val * (1.0 - out_val),)
    return make_node(out_val, (a,), bw)


@_primitive
def softplus(a) -> Node:
    """log(1 + e^x), computed stably; derivative is the logistic."""
    a = as_node(a)
    def bw(g):
        return (g * 0.5 * (np.tanh(0.5 * a.value) + 1.0),)
    return make_node(np.logaddexp(0.0, a.value), (a,), bw)


@_primitive
def softmax_last(a) -> Node:
    """Softmax along the last axis."""
    a = as_node(a)
    shifted = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_val = e / e.sum(axis=-1, keepdims=True)
    def bw(g):
        dot = (g * out_val).sum(axis=-1, keepdims=True)
        return (out_val * (g - dot),)
    return make_node(out_val, (a,), bw)


# ---------------------------------------------------------------------
# linear algebra and reductions
# ---------------------------------------------------------------------


@_primitive
def matmul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise DimensionError(
            f"matmul expects 2-D operands, got {a.value.shape} and {b.value.shape}"
        )
    if a.value.shape[1] != b.value.shape[0]:
        raise DimensionError(
            f"matmul inner dimensions differ: {a.value.shape} vs {b.value.shape}"
        )
    def bw(g):
        return (
            g @ b.value.T if a.requires_grad else None,
            a.value.T @ g if b.requires_grad else None,
        )
    return make_node(a.value @ b.value, (a, b), bw)


@_primitive
def sum_all(a) -> Node:
    a = as_node(a)
    def bw(g):
        return (np.broadcast_to(g, a.value.shape).copy(),)
    return make_node(a.value.sum(), (a,), bw)


@_primitive
def mean_all(a) -> Node:
    a = as_node(a)
    n = a.value.size
    def bw(g):
        return (np.broadcast_to(g / n, a.value.shape).copy(),)
    return make_node(a.value.mean(), (a,), bw)


@_primitive
def cumsum_last(a) -> Node:
    """Cumulative sum along the last axis."""
    a = as_node(a)
    def bw(g):
        return (np.flip(np.cumsum(np.flip(g, axis=-1), axis=-1), axis=-1),)
    return make_node(np.cumsum(a.value, axis=-1), (a,), bw)


# ---------------------------------------------------------------------
# shape movement and indexing
# ---------------------------------------------------------------------


@_primitive
def reshape(a, shape) -> Node:
    a = as_node(a)
    old = a.value.shape
    def bw(g):
        return (g.reshape(old),)
    return make_node(a.value.reshape(shape), (a,), bw)


@_primitive
def transpose(a, axes) -> Node:
    a = as_node(a)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    def bw(g):
        return (g.transpose(inverse),)
    return make_node(a.value.transpose(axes), (a,), bw)


@_primitive
def concat_last(parts) -> Node:
    """Concatenate 2-D nodes along the last axis."""
    parts = [as_node(p) for p in parts]
    widths = [p.value.shape[-1] for p in parts]
    bounds = np.cumsum([0] + widths)
    def bw(g):
        return tuple(
            g[..., bounds[i]: bounds[i + 1]] if p.requires_grad else None
            for i, p in enumerate(parts)
        )
    return make_node(np.concatenate([p.value for p in parts], axis=-1), tuple(parts), bw)


@_primitive
def slice_last(a, lo: int, hi: int) -> Node:
    """Columns [lo, hi) of the last axis."""
    a = as_node(a)
    def bw(g):
        full = np.zeros_like(a.value)
        full[..., lo:hi] = g
        return (full,)
    return make_node(a.value[..., lo:hi], (a,), bw)


@_primitive
def slice_rows(a, lo: int, hi: int) -> Node:
    """Rows [lo, hi) of the first axis."""
    a = as_node(a)
    def bw(g):
        full = np.zeros_like(a.value)
        full[lo:hi] = g
        return (full,)
    return make_node(a.value[lo:hi], (a,), bw)


@_primitive
def gather_last(a, index: np.ndarray) -> Node:
    """Pick one entry per row: out[b] = a[b, index[b]] for a of shape (B, K)."""
    a = as_node(a)
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(a.value.shape[0])
    def bw(g):
        full = np.zeros_like(a.value)
        np.add.at(full, (rows, index), g)
        return (full,)
    return make_node(a.value[rows, index], (a,), bw)


@_primitive
def basis_contract(m, w) -> Node:
    """out[b, o] = sum_k m[b, k, o] * w[b, k].

    The workhorse of the varying-coefficient head: m holds per-sample
    basis-indexed activations, w the basis weights at the sample's dosage.
    """
    m, w = as_node(m), as_node(w)
    if m.value.ndim != 3 or w.value.ndim != 2 or m.value.shape[:2] != w.value.shape:
        raise DimensionError(
            f"basis_contract expects (B,K,O) and (B,K), got {m.value.shape} and {w.value.shape}"
        )
    def bw(g):
        return (
            np.einsum("bo,bk->bko", g, w.value) if m.requires_grad else None,
            np.einsum("bko,bo->bk", m.value, g) if w.requires_grad else None,
        )
    return make_node(np.einsum("bko,bk->bo", m.value, w.value), (m, w), bw)


@_primitive
def row_kron(a, b) -> Node:
    """Row-wise Kronecker product: (B, K1) x (B, K2) -> (B, K1*K2).

    Index of the first factor varies slowest in the output.
    """
    a, b = as_node(a), as_node(b)
    B, k1 = a.value.shape
    k2 = b.value.shape[1]
    out_val = (a.value[:, :, None] * b.value[:, None, :]).reshape(B, k1 * k2)
    def bw(g):
        g3 = g.reshape(B, k1, k2)
        return (
            np.einsum("bij,bj->bi", g3, b.value) if a.requires_grad else None,
            np.einsum("bij,bi->bj", g3, a.value) if b.requires_grad else None,
        )
    return make_node(out_val, (a, b), bw)


# ---------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------

_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "identity": lambda x: x}


def dense(x, w, b, activation: str = "identity") -> Node:
    """act(x @ w + b) with shape checking.

    x: (B, d_in), w: (d_in, d_out), b: (d_out,).
    """
    x, w = as_node(x), as_node(w)
    if x.value.shape[-1] != w.value.shape[0]:
        raise DimensionError(
            f"dense: input has {x.value.shape[-1]} features but weight is {w.value.shape}"
        )
    try:
        act = _ACTIVATIONS[activation]
    except KeyError:
        raise ContractError(f"unknown activation {activation!r}") from None
    return act(add(matmul(x, w), b))


# ---------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------


def _topo_order(root: Node) -> list[Node]:
    """Post-order over the recorded graph, iteratively (graphs get deep)."""
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
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


def backward(loss: Node, params=None):
    """Populate ``.grad`` over the graph below ``loss``.

    loss must be scalar.  Gradients of the touched subgraph are reset
    first, then accumulated, so two backward calls do not bleed into each
    other.  When ``params`` (an iterable of nodes) is given, returns a
    dict mapping each param to its gradient; parameters the loss does not
    reach get (and hold) zeros.
    """
    if loss.value.size != 1:
        raise ContractError(
            f"backward requires a scalar loss, got shape {loss.value.shape}"
        )
    order = _topo_order(loss)
    for node in order:
        node.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        contribs = node._backward(node.grad)
        for parent, contrib in zip(node._parents, contribs):
            if contrib is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = np.array(contrib) if contrib.base is not None else contrib
            else:
                parent.grad = parent.grad + contrib
    if params is not None:
        out = {}
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.value)
            out[id(p)] = p.grad
        return out
    return None


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------


class Adam:
    """Adam with bias correction (beta1=0.9, beta2=0.999, eps=1e-8).

    ``step`` consumes ``p.grad`` for every tracked parameter and then
    clears it.  Parameters whose gradient is missing or non-finite are
    skipped for that step and counted in ``skipped_updates``.
    """

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.value) for p in self.params]
        self._v = [np.zeros_like(p.value) for p in self.params]
        self.skipped_updates = 0

    def step(self) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None or not np.all(np.isfinite(g)):
                self.skipped_updates += 1
                p.grad = None
                continue
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self._m[i] / b1t
            v_hat = self._v[i] / b2t
            p.value = p.value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
            p.grad = None


class ScatteredAdam:
    """Adam state over one long vector, updated on index subsets.

    Used for per-sample multipliers: each mini-batch only touches its own
    entries, and bias correction runs on per-entry step counts so entries
    seen rarely are not under-corrected.  ``step_at`` performs a descent
    step; callers wanting ascent pass the negated gradient.
    """

    def __init__(self, size: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self._m = np.zeros(size)
        self._v = np.zeros(size)
        self._t = np.zeros(size, dtype=np.int64)
        self.skipped_updates = 0

    def step_at(self, values: np.ndarray, index: np.ndarray, grad: np.ndarray) -> np.ndarray:
        """Return updated ``values`` after a descent step on ``index`` entries."""
        if not np.all(np.isfinite(grad)):
            self.skipped_updates += 1
            return values
        self._t[index] += 1
        t = self._t[index]
        self._m[index] = self.beta1 * self._m[index] + (1.0 - self.beta1) * grad
        self._v[index] = self.beta2 * self._v[index] + (1.0 - self.beta2) * (grad * grad)
        m_hat = self._m[index] / (1.0 - self.beta1 ** t)
        v_hat = self._v[index] / (1.0 - self.beta2 ** t)
        out = values.copy()
        out[index] = values[index] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return out


# ---------------------------------------------------------------------
# parameter (de)serialization
# ---------------------------------------------------------------------


def params_to_payload(named: dict[str, np.ndarray]) -> list[dict]:
    """JSON-safe list of named arrays.  Floats round-trip bit-exactly
    (Python's repr of a float is shortest-round-trip)."""
    return [
        {
            "name": name,
            "shape": list(np.asarray(arr).shape),
            "values": np.asarray(arr, dtype=np.float64).ravel().tolist(),
        }
        for name, arr in named.items()
    ]


def payload_to_params(payload: list[dict]) -> dict[str, np.ndarray]:
    out = {}
    for entry in payload:
        arr = np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
        out[entry["name"]] = arr
    return out


def save_params(path, named: dict[str, np.ndarray], extra: dict | None = None) -> None:
    """Write named parameter arrays (plus optional metadata) to JSON."""
    doc = {"params": params_to_payload(named)}
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_params(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path) as fh:
        doc = json.load(fh)
    params = payload_to_params(doc.pop("params"))
    return params, doc
