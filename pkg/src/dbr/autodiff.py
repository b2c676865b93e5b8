"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every differentiable computation in the package is composed from the closed
primitive catalogue registered here.  A primitive is a pair of functions: a
forward that maps input arrays (plus attributes) to an output array and an
optional context, and a backward that maps the output gradient back to one
gradient per input.

Nodes are numbered in creation order, so sorting the nodes reachable from a
loss by id gives a valid topological order for the backward sweep.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_node_ids = itertools.count()
_grad_enabled = True


class ShapeError(ValueError):
    """Input shapes do not conform to a primitive's signature."""


class NonFiniteError(FloatingPointError):
    """A forward value or gradient contains NaN or Inf."""


class UnknownPrimitiveError(KeyError):
    """No primitive is registered under the requested id."""


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable[..., tuple[np.ndarray, Any]]
    backward: Callable[..., list[np.ndarray | None]]


PRIMITIVES: dict[str, Primitive] = {}


def register(name: str, forward, backward) -> None:
    PRIMITIVES[name] = Primitive(name, forward, backward)


@dataclass(eq=False)
class Node:
    id: int
    kind: str
    inputs: tuple["Tensor", ...]
    attrs: dict
    ctx: Any


class Tensor:
    """Dense float64 array that may take part in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "node", "grad", "name")
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data must be finite")
        self.data = arr
        self.requires_grad = requires_grad
        self.node: Node | None = None
        self.grad: np.ndarray | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.node = None
        t.grad = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data, False)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; every method routes through apply_primitive
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
        return apply_primitive("scale", [self], {"c": -1.0})

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        raise TypeError("use slice_axis(); fancy indexing is not a primitive")

    def sum(self, axis=None, keepdims=False):
        return apply_primitive("sum", [self], {"axis": axis, "keepdims": keepdims})

    def mean(self, axis=None, keepdims=False):
        return apply_primitive("mean", [self], {"axis": axis, "keepdims": keepdims})

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply_primitive("reshape", [self], {"shape": tuple(shape)})

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return apply_primitive("transpose", [self], {"axes": tuple(axes) or None})

    def swap_last(self):
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return self.transpose(axes)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording graph nodes."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def apply_primitive(kind: str, inputs: Sequence, attrs: dict | None = None) -> Tensor:
    """Evaluate a registered primitive and record a graph node when needed."""
    try:
        prim = PRIMITIVES[kind]
    except KeyError:
        raise UnknownPrimitiveError(kind) from None
    attrs = attrs or {}
    tensors = tuple(x if isinstance(x, Tensor) else Tensor(x) for x in inputs)
    out, ctx = prim.forward([t.data for t in tensors], **attrs)
    if not np.isfinite(out).all():
        raise NonFiniteError(f"non-finite output from primitive '{kind}'")
    needs_grad = _grad_enabled and any(t.requires_grad for t in tensors)
    result = Tensor._wrap(out, needs_grad)
    if needs_grad:
        result.node = Node(next(_node_ids), kind, tensors, attrs, ctx)
    return result


@dataclass
class Tape:
    """Topologically ordered nodes reachable from a loss, plus gradients."""

    nodes: list[Node] = field(default_factory=list)
    grads: dict[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def trace(cls, loss: Tensor) -> "Tape":
        seen: dict[int, Node] = {}
        stack = [loss]
        while stack:
            t = stack.pop()
            node = t.node
            if node is None or node.id in seen:
                continue
            seen[node.id] = node
            stack.extend(node.inputs)
        return cls(nodes=[seen[k] for k in sorted(seen)])


def _leaves(tape: Tape) -> list[Tensor]:
    found: dict[int, Tensor] = {}
    for node in tape.nodes:
        for t in node.inputs:
            if t.requires_grad and t.node is None:
                found[id(t)] = t
    return list(found.values())


def backward(loss: Tensor, tape: Tape | None = None) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(.) to every grad-requiring leaf.

    Leaf gradients are returned in a dict keyed by tensor and also stored on
    ``tensor.grad`` (overwriting any previous value).
    """
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    if tape is None:
        tape = Tape.trace(loss)
    if loss.node is None:
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
            return {loss: loss.grad}
        return {}
    if not tape.nodes:
        raise ValueError("empty tape")
    out_of: dict[int, Tensor] = {}
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict[int, np.ndarray] = {}
    # map node id -> output tensor, found through consumers
    out_of[loss.node.id] = loss
    for node in tape.nodes:
        for t in node.inputs:
            if t.node is not None:
                out_of[t.node.id] = t
    for node in reversed(tape.nodes):
        out = out_of.get(node.id)
        if out is None:
            continue
        g = grads.pop(id(out), None)
        if g is None:
            continue
        prim = PRIMITIVES[node.kind]
        in_grads = prim.backward(g, node.ctx, [t.data for t in node.inputs], out.data, **node.attrs)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if t.node is None:
                prev = leaf_grads.get(key)
                leaf_grads[key] = gi if prev is None else prev + gi
            else:
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
        tape.grads[node.id] = g
    result: dict[Tensor, np.ndarray] = {}
    for leaf in _leaves(tape):
        g = leaf_grads.get(id(leaf))
        if g is None:
            g = np.zeros_like(leaf.data)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {leaf.name or 'leaf'}")
        leaf.grad = g
        result[leaf] = g
    return result


# ---------------------------------------------------------------------------
# broadcasting helpers


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, kind: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise binary


def _add_f(xs):
    a, b = xs
    _check_broadcast(a, b, "add")
    return a + b, None


def _add_b(g, ctx, xs, out):
    return [_unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)]


def _sub_f(xs):
    a, b = xs
    _check_broadcast(a, b, "sub")
    return a - b, None


def _sub_b(g, ctx, xs, out):
    return [_unbroadcast(g, xs[0].shape), _unbroadcast(-g, xs[1].shape)]


def _mul_f(xs):
    a, b = xs
    _check_broadcast(a, b, "mul")
    return a * b, None


def _mul_b(g, ctx, xs, out):
    a, b = xs
    return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]


def _div_f(xs):
    a, b = xs
    _check_broadcast(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        return a / b, None


def _div_b(g, ctx, xs, out):
    a, b = xs
    return [_unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)]


register("add", _add_f, _add_b)
register("sub", _sub_f, _sub_b)
register("mul", _mul_f, _mul_b)
register("div", _div_f, _div_b)

# scalar ops


def _scale_f(xs, c):
    return xs[0] * c, None


def _scale_b(g, ctx, xs, out, c):
    return [g * c]


def _shift_f(xs, c):
    return xs[0] + c, None


def _shift_b(g, ctx, xs, out, c):
    return [g]


register("scale", _scale_f, _scale_b)
register("shift", _shift_f, _shift_b)

# elementwise unary


def _tanh_f(xs):
    return np.tanh(xs[0]), None


def _tanh_b(g, ctx, xs, out):
    return [g * (1.0 - out * out)]


def _sigmoid_f(xs):
    x = xs[0]
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return out, None


def _sigmoid_b(g, ctx, xs, out):
    return [g * out * (1.0 - out)]


def _exp_f(xs):
    with np.errstate(over="ignore"):
        return np.exp(xs[0]), None


def _exp_b(g, ctx, xs, out):
    return [g * out]


def _log_f(xs):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.log(xs[0]), None


def _log_b(g, ctx, xs, out):
    return [g / xs[0]]


def _abs_f(xs):
    return np.abs(xs[0]), None


def _abs_b(g, ctx, xs, out):
    return [g * np.sign(xs[0])]


def _relu_f(xs):
    return np.maximum(xs[0], 0.0), None


def _relu_b(g, ctx, xs, out):
    # subgradient 0 at the kink
    return [g * (xs[0] > 0.0)]


register("tanh", _tanh_f, _tanh_b)
register("sigmoid", _sigmoid_f, _sigmoid_b)
register("exp", _exp_f, _exp_b)
register("log", _log_f, _log_b)
register("abs", _abs_f, _abs_b)
register("relu", _relu_f, _relu_b)

# normalisations


def _check_axis(x: np.ndarray, axis: int, kind: str) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"{kind}: axis {axis} invalid for shape {x.shape}")
    return axis % x.ndim


def _softmax_f(xs, axis=-1, mask=None):
    x = xs[0]
    _check_axis(x, axis, "softmax")
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    out = e / e.sum(axis=axis, keepdims=True)
    return out, None


def _softmax_b(g, ctx, xs, out, axis=-1, mask=None):
    dot = (g * out).sum(axis=axis, keepdims=True)
    return [out * (g - dot)]


def _log_softmax_f(xs, axis=-1):
    x = xs[0]
    _check_axis(x, axis, "log_softmax")
    m = np.max(x, axis=axis, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    return z - lse, None


def _log_softmax_b(g, ctx, xs, out, axis=-1):
    return [g - np.exp(out) * g.sum(axis=axis, keepdims=True)]


def _layer_norm_f(xs, eps=1e-5):
    x = xs[0]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    return xc * inv, inv


def _layer_norm_b(g, inv, xs, out, eps=1e-5):
    n = xs[0].shape[-1]
    gm = g.mean(axis=-1, keepdims=True)
    gy = (g * out).mean(axis=-1, keepdims=True)
    return [inv * (g - gm - out * gy)]


def _l2norm_f(xs, axis=-1, eps=0.0, keepdims=False):
    x = xs[0]
    _check_axis(x, axis, "l2norm")
    n = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    out = np.maximum(n, eps)
    return (out if keepdims else np.squeeze(out, axis=axis)), n


def _l2norm_b(g, n, xs, out, axis=-1, eps=0.0, keepdims=False):
    x = xs[0]
    if not keepdims:
        g = np.expand_dims(g, axis)
    active = n > eps
    safe = np.where(active, n, 1.0)
    return [np.where(active, g * x / safe, 0.0)]


register("softmax", _softmax_f, _softmax_b)
register("log_softmax", _log_softmax_f, _log_softmax_b)
register("layer_norm", _layer_norm_f, _layer_norm_b)
register("l2norm", _l2norm_f, _l2norm_b)

# linear algebra and shape manipulation


def _matmul_f(xs):
    a, b = xs
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul: operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims {a.shape} vs {b.shape}") from None
    return a @ b, None


def _matmul_b(g, ctx, xs, out):
    a, b = xs
    ga = g @ np.swapaxes(b, -1, -2)
    gb = np.swapaxes(a, -1, -2) @ g
    return [_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)]


def _transpose_f(xs, axes=None):
    return np.transpose(xs[0], axes), None


def _transpose_b(g, ctx, xs, out, axes=None):
    if axes is None:
        return [np.transpose(g)]
    return [np.transpose(g, np.argsort(axes))]


def _reshape_f(xs, shape):
    x = xs[0]
    try:
        return x.reshape(shape), None
    except ValueError:
        raise ShapeError(f"reshape: {x.shape} -> {shape}") from None


def _reshape_b(g, ctx, xs, out, shape):
    return [g.reshape(xs[0].shape)]


def _concat_f(xs, axis=-1):
    ref = xs[0]
    ax = _check_axis(ref, axis, "concat")
    for x in xs[1:]:
        if x.ndim != ref.ndim or any(
            x.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax
        ):
            raise ShapeError(f"concat: {ref.shape} vs {x.shape} on axis {axis}")
    return np.concatenate(xs, axis=ax), np.cumsum([x.shape[ax] for x in xs])[:-1]


def _concat_b(g, splits, xs, out, axis=-1):
    return np.split(g, splits, axis=axis)


def _slice_f(xs, axis, start, stop):
    x = xs[0]
    ax = _check_axis(x, axis, "slice")
    if not 0 <= start < stop <= x.shape[ax]:
        raise ShapeError(f"slice: [{start}:{stop}] out of range for axis of size {x.shape[ax]}")
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(start, stop)
    return x[tuple(idx)], tuple(idx)


def _slice_b(g, idx, xs, out, axis, start, stop):
    full = np.zeros_like(xs[0])
    full[idx] = g
    return [full]


def _stack_f(xs, axis=0):
    shapes = {x.shape for x in xs}
    if len(shapes) != 1:
        raise ShapeError(f"stack: mismatched shapes {sorted(shapes)}")
    return np.stack(xs, axis=axis), None


def _stack_b(g, ctx, xs, out, axis=0):
    n = len(xs)
    return [np.take(g, i, axis=axis) for i in range(n)]


def _expand_reduced(g, x, axis, keepdims):
    if axis is None:
        return np.broadcast_to(np.reshape(g, (1,) * x.ndim), x.shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, x.shape)


def _sum_f(xs, axis=None, keepdims=False):
    return np.asarray(xs[0].sum(axis=axis, keepdims=keepdims)), None


def _sum_b(g, ctx, xs, out, axis=None, keepdims=False):
    return [np.array(_expand_reduced(g, xs[0], axis, keepdims))]


def _mean_f(xs, axis=None, keepdims=False):
    return np.asarray(xs[0].mean(axis=axis, keepdims=keepdims)), None


def _mean_b(g, ctx, xs, out, axis=None, keepdims=False):
    x = xs[0]
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return [np.array(_expand_reduced(g, x, axis, keepdims)) / n]


def _conv1d_f(xs, dilation=1):
    # x: (B, T, Cin), w: (k, Cin, Cout); causal left padding keeps length T
    x, w = xs
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ShapeError(f"conv1d: x {x.shape}, w {w.shape}")
    k = w.shape[0]
    pad = (k - 1) * dilation
    T = x.shape[1]
    xp = np.pad(x, ((0, 0), (pad, 0), (0, 0)))
    out = np.zeros((x.shape[0], T, w.shape[2]))
    for j in range(k):
        out += xp[:, j * dilation : j * dilation + T, :] @ w[j]
    return out, xp


def _conv1d_b(g, xp, xs, out, dilation=1):
    x, w = xs
    k = w.shape[0]
    pad = (k - 1) * dilation
    T = x.shape[1]
    gxp = np.zeros_like(xp)
    gw = np.empty_like(w)
    for j in range(k):
        seg = xp[:, j * dilation : j * dilation + T, :]
        gw[j] = np.einsum("btc,bto->co", seg, g)
        gxp[:, j * dilation : j * dilation + T, :] += g @ w[j].T
    return [gxp[:, pad:, :], gw]


register("matmul", _matmul_f, _matmul_b)
register("transpose", _transpose_f, _transpose_b)
register("reshape", _reshape_f, _reshape_b)
register("concat", _concat_f, _concat_b)
register("slice", _slice_f, _slice_b)
register("stack", _stack_f, _stack_b)
register("sum", _sum_f, _sum_b)
register("mean", _mean_f, _mean_b)
register("conv1d", _conv1d_f, _conv1d_b)


# ---------------------------------------------------------------------------
# functional front-end


def add(a, b):
    return apply_primitive("add", [a, b])


def sub(a, b):
    return apply_primitive("sub", [a, b])


def mul(a, b):
    return apply_primitive("mul", [a, b])


def div(a, b):
    return apply_primitive("div", [a, b])


def scale(x, c: float):
    return apply_primitive("scale", [x], {"c": float(c)})


def shift(x, c: float):
    return apply_primitive("shift", [x], {"c": float(c)})


def matmul(a, b):
    return apply_primitive("matmul", [a, b])


def tanh(x):
    return apply_primitive("tanh", [x])


def sigmoid(x):
    return apply_primitive("sigmoid", [x])


def exp(x):
    return apply_primitive("exp", [x])


def log(x):
    return apply_primitive("log", [x])


def absolute(x):
    return apply_primitive("abs", [x])


def relu(x):
    return apply_primitive("relu", [x])


def softmax(x, axis: int = -1, mask=None):
    return apply_primitive("softmax", [x], {"axis": axis, "mask": mask})


def log_softmax(x, axis: int = -1):
    return apply_primitive("log_softmax", [x], {"axis": axis})


def layer_norm(x, eps: float = 1e-5):
    return apply_primitive("layer_norm", [x], {"eps": eps})


def l2norm(x, axis: int = -1, eps: float = 0.0, keepdims: bool = False):
    return apply_primitive("l2norm", [x], {"axis": axis, "eps": eps, "keepdims": keepdims})


def concat(xs: Iterable, axis: int = -1):
    return apply_primitive("concat", list(xs), {"axis": axis})


def slice_axis(x, axis: int, start: int, stop: int):
    return apply_primitive("slice", [x], {"axis": axis, "start": start, "stop": stop})


def stack(xs: Iterable, axis: int = 0):
    return apply_primitive("stack", list(xs), {"axis": axis})


def conv1d(x, w, dilation: int = 1):
    return apply_primitive("conv1d", [x, w], {"dilation": dilation})
