"""Dense tensors with reverse-mode automatic differentiation.

Every primitive returns a new :class:`Tensor`; when any input requires a
gradient (and recording is enabled) the output carries a :class:`Node` that
knows how to push the output gradient back to its inputs. ``backward`` walks
the nodes reachable from a scalar loss in reverse creation order.

Broadcasting in the elementwise primitives is deliberately narrow: operands
must have equal shapes or one of them must be a scalar. Bias addition,
grouped (per-module) affine maps and batched contractions have their own
primitives (:func:`linear`, :func:`group_linear`, :func:`einsum`).
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float64
_counter = itertools.count()
_state = threading.local()


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested primitive."""


class NonFiniteError(FloatingPointError):
    """A primitive produced NaN or Inf."""


class GraphError(RuntimeError):
    """backward was called on something that is not a recorded scalar."""


class DeterminismError(RuntimeError):
    """A function under finite-difference checking is not deterministic."""


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation mode)."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@dataclass(eq=False)
class Node:
    """One recorded primitive application."""

    op: str
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    index: int = field(default_factory=lambda: next(_counter))


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.array(data, dtype=dtype or _DEFAULT_DTYPE, copy=True)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor constructed from non-finite data")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.node = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple:
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; all routes go through the primitives below
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return index(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, out: np.ndarray, inputs: tuple, backward_fn) -> Tensor:
    if not np.isfinite(out).all():
        raise NonFiniteError(f"non-finite value produced by primitive '{op}'")
    t = Tensor._wrap(out)
    if _grad_enabled() and any(isinstance(x, Tensor) and (x.requires_grad or x.node is not None) for x in inputs):
        t.node = Node(op, inputs, backward_fn)
        t.requires_grad = True
    return t


def _tracked(x) -> bool:
    return isinstance(x, Tensor) and (x.requires_grad or x.node is not None)


# --------------------------------------------------------------------------
# graph traversal


@dataclass
class Graph:
    """Recorded primitive applications reachable from a loss, in creation order."""

    nodes: list[Node]

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        if out.node is None:
            raise GraphError("tensor is not the output of a recorded primitive")
        seen: set[int] = set()
        nodes = []
        stack = [out.node]
        while stack:
            node = stack.pop()
            if id(node) in seen:
                continue
            seen.add(id(node))
            nodes.append(node)
            for x in node.inputs:
                if isinstance(x, Tensor) and x.node is not None and id(x.node) not in seen:
                    stack.append(x.node)
        nodes.sort(key=lambda n: n.index)
        return cls(nodes)


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if not isinstance(loss, Tensor) or loss.size != 1 or loss.ndim > 1:
        raise GraphError(f"backward needs a scalar loss, got shape {getattr(loss, 'shape', None)}")
    if loss.node is None:
        raise GraphError("loss is not on a recorded graph")
    graph = Graph.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss.node): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        in_grads = node.backward(g)
        for x, gx in zip(node.inputs, in_grads):
            if gx is None or not _tracked(x):
                continue
            if x.node is not None:
                key = id(x.node)
                if key in grads:
                    grads[key] = grads[key] + gx
                else:
                    grads[key] = gx
            elif x.requires_grad:
                x.grad = gx.copy() if x.grad is None else x.grad + gx


# --------------------------------------------------------------------------
# elementwise


def _operands(a, b) -> tuple[Tensor, Tensor]:
    # plain python scalars take the dtype of the tensor operand
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(b, dtype=a.dtype)
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(a, dtype=b.dtype)
    return as_tensor(a), as_tensor(b)


def _binary_shapes(op, a: Tensor, b: Tensor):
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape) if shape else np.sum(g)


def add(a, b) -> Tensor:
    a, b = _operands(a, b)
    _binary_shapes("add", a, b)
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _operands(a, b)
    _binary_shapes("sub", a, b)
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _operands(a, b)
    _binary_shapes("mul", a, b)
    return _make("mul", a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _make("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows and avoids boolean-mask indexing
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make("relu", np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,))


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make("log", out, (a,), lambda g: (g / a.data,))


def square(a: Tensor) -> Tensor:
    return _make("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def dropout(a: Tensor, p: float, rng: np.random.Generator | None = None, training: bool = True) -> Tensor:
    """Inverted dropout. Identity when ``training`` is false or ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    mask = (rng.random(a.shape) >= p).astype(a.dtype) / (1.0 - p)
    return _make("dropout", a.data * mask, (a,), lambda g: (g * mask,))


def where(mask, a: Tensor, b: Tensor) -> Tensor:
    """Select ``a`` where ``mask`` holds, else ``b``. ``mask`` is constant and may broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"where: branch shapes differ {a.shape} vs {b.shape}")
    mask = np.asarray(mask, dtype=bool)
    try:
        full = np.broadcast_to(mask, a.shape)
    except ValueError as exc:
        raise DimensionError(f"where: mask {mask.shape} does not broadcast to {a.shape}") from exc
    zero = np.zeros((), dtype=a.dtype)
    return _make("where", np.where(full, a.data, b.data), (a, b),
                 lambda g: (np.where(full, g, zero), np.where(full, zero, g)))


# --------------------------------------------------------------------------
# contractions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _make("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``; leading axes are batch axes."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} does not match weight {w.shape}")
    with np.errstate(invalid="ignore", over="ignore"):
        out = x.data @ w.data
    if b is not None:
        out = out + b.data

    def bw(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ w.data.T
        gw = x.data.reshape(-1, x.shape[-1]).T @ g2
        gb = g2.sum(axis=0) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return _make("linear", out, inputs, bw)


def group_linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Per-group affine map: ``out[..., k, :] = x[..., k, :] @ w[k] + b[k]``.

    ``x`` is ``(B, n, d_in)``, ``w`` is ``(n, d_in, d_out)`` and ``b`` is ``(n, d_out)``.
    Group ``k`` only ever touches ``w[k]`` and ``b[k]``.
    """
    if x.ndim != 3 or w.ndim != 3 or x.shape[1] != w.shape[0] or x.shape[2] != w.shape[1]:
        raise DimensionError(f"group_linear: input {x.shape} does not match weight {w.shape}")
    if b is not None and b.shape != (w.shape[0], w.shape[2]):
        raise DimensionError(f"group_linear: bias {b.shape} does not match weight {w.shape}")
    # (n, B, d_in) @ (n, d_in, d_out) -> (n, B, d_out)
    xt = np.swapaxes(x.data, 0, 1)
    out = np.swapaxes(np.matmul(xt, w.data), 0, 1)
    if b is not None:
        out = out + b.data

    def bw(g):
        gt = np.swapaxes(g, 0, 1)
        gx = np.swapaxes(np.matmul(gt, np.swapaxes(w.data, 1, 2)), 0, 1)
        gw = np.matmul(np.swapaxes(xt, 1, 2), gt)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    inputs = (x, w, b) if b is not None else (x, w)
    return _make("group_linear", np.ascontiguousarray(out), inputs, bw)


def bmm(a: Tensor, b: Tensor, transpose_b: bool = False) -> Tensor:
    """Batched matrix product over the last two axes; ``transpose_b`` uses ``bᵀ``."""
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"bmm: expected matching (B, r, s) operands, got {a.shape} and {b.shape}")
    bt = np.swapaxes(b.data, 1, 2) if transpose_b else b.data
    if a.shape[2] != bt.shape[1]:
        raise DimensionError(f"bmm: inner extents differ, {a.shape} and {b.shape} (transpose_b={transpose_b})")
    out = np.matmul(a.data, bt)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(bt, 1, 2))
        gbt = np.matmul(np.swapaxes(a.data, 1, 2), g)
        return ga, (np.swapaxes(gbt, 1, 2) if transpose_b else gbt)

    return _make("bmm", out, (a, b), bw)


def _parse_einsum(spec: str):
    lhs, out = spec.replace(" ", "").split("->")
    a_sub, b_sub = lhs.split(",")
    for sub_ in (a_sub, b_sub):
        if len(set(sub_)) != len(sub_):
            raise ValueError(f"einsum: repeated index within an operand in '{spec}'")
    for sub_, other in ((a_sub, b_sub), (b_sub, a_sub)):
        for c in sub_:
            if c not in out and c not in other:
                raise ValueError(f"einsum: index '{c}' summed within a single operand in '{spec}'")
    return a_sub, b_sub, out


def einsum(spec: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum; gradients are the matching transposed contractions."""
    a_sub, b_sub, out_sub = _parse_einsum(spec)
    try:
        out = np.einsum(spec, a.data, b.data, optimize=False)
    except ValueError as exc:
        raise DimensionError(f"einsum '{spec}': {a.shape} and {b.shape}: {exc}") from exc

    def bw(g):
        ga = np.einsum(f"{out_sub},{b_sub}->{a_sub}", g, b.data, optimize=False)
        gb = np.einsum(f"{out_sub},{a_sub}->{b_sub}", g, a.data, optimize=False)
        return ga, gb

    return _make("einsum", out, (a, b), bw)


# --------------------------------------------------------------------------
# normalisation and reductions


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.ndim == 0 or a.shape[axis] == 0:
        raise DimensionError(f"softmax over an empty axis of shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make("softmax", out, (a,), bw)


def softmax_rows(m: Tensor) -> Tensor:
    if m.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {m.shape}")
    return softmax(m, axis=1)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.ndim == 0 or a.shape[axis] == 0:
        raise DimensionError(f"log_softmax over an empty axis of shape {a.shape}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)
    return _make("log_softmax", out, (a,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def tsum(a: Tensor, axis=None) -> Tensor:
    out = np.sum(a.data, axis=axis)
    shape = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make("sum", np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(tsum(a, axis), 1.0 / float(n))


# --------------------------------------------------------------------------
# structural


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {shape}") from exc
    return _make("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return _make("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def _basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (slice, int, type(Ellipsis))) or p is None for p in parts)


def index(a: Tensor, idx) -> Tensor:
    shape = a.shape
    out = np.array(a.data[idx], copy=True)
    basic = _basic_index(idx)

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        if basic:
            # basic slices never repeat an element
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make("index", out, (a,), bw)


def expand(a: Tensor, shape) -> Tensor:
    """Broadcast ``a`` to ``shape`` by prepending axes; the gradient sums them out."""
    shape = tuple(shape)
    extra = len(shape) - a.ndim
    if extra < 0 or shape[extra:] != a.shape:
        raise DimensionError(f"expand: cannot broadcast {a.shape} to {shape}")
    out = np.broadcast_to(a.data, shape).copy()
    return _make("expand", out, (a,), lambda g: (g.sum(axis=tuple(range(extra))),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat of an empty list")
    ref = parts[0].shape
    ax = axis % len(ref) if ref else 0
    for p in parts[1:]:
        if p.ndim != len(ref) or p.shape[:ax] + p.shape[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise DimensionError(f"concat: part shape {p.shape} incompatible with {ref} along axis {axis}")
    if len(parts) == 1:
        return parts[0]
    offsets = np.cumsum([p.shape[ax] for p in parts])[:-1]
    out = np.concatenate([p.data for p in parts], axis=ax)
    return _make("concat", out, tuple(parts), lambda g: tuple(np.split(g, offsets, axis=ax)))


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    return concat(parts, axis=0)


def split(a: Tensor, sizes: Iterable[int], axis: int = 0) -> list[Tensor]:
    out, start = [], 0
    for s in sizes:
        sl = [slice(None)] * a.ndim
        sl[axis] = slice(start, start + s)
        out.append(index(a, tuple(sl)))
        start += s
    if start != a.shape[axis]:
        raise DimensionError(f"split sizes sum to {start}, axis has {a.shape[axis]}")
    return out


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    expanded = [reshape(p, p.shape[:axis] + (1,) + p.shape[axis:]) for p in parts]
    return concat(expanded, axis=axis)


# --------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy of ``(B, C)`` logits against integer labels."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    n_cls = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_cls):
        raise ValueError(f"label out of range for {n_cls} classes")
    logp = log_softmax(logits, axis=1)
    picked = index(logp, (np.arange(labels.size), labels))
    return scale(tsum(picked), -1.0 / labels.size)


def mse(pred: Tensor, target) -> Tensor:
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse: prediction {pred.shape} vs target {target.shape}")
    return mean(square(sub(pred, target)))


# --------------------------------------------------------------------------
# gradient verification


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> float:
    """Max relative error between backprop and central differences of ``f`` at ``x``.

    ``x`` is perturbed in place entry by entry and restored afterwards.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x.data = np.array(x.data, order="C", copy=True)
    base = x.data.copy()
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    try:
        out = f(x)
        if out.size != 1:
            raise GraphError(f"finite_diff_check needs a scalar function, got shape {out.shape}")
        again = f(x)
        if out.data.tobytes() != again.data.tobytes():
            raise DeterminismError("f returned different values for identical input")
        if out.node is None:
            analytic = np.zeros_like(base)
        else:
            backward(out)
            analytic = np.zeros_like(base) if x.grad is None else x.grad.copy()
        numeric = np.zeros_like(base)
        flat = x.data.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                fp = f(x).data.item()
                flat[i] = orig - eps
                fm = f(x).data.item()
                flat[i] = orig
                numeric.reshape(-1)[i] = (fp - fm) / (2.0 * eps)
    finally:
        x.data[...] = base
        x.grad = None
        x.requires_grad = was
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0
