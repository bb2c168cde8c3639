"""Reverse-mode automatic differentiation over float64 numpy arrays.

Every backward rule is written in terms of the same differentiable
operations used in the forward pass, so gradients returned with
``create_graph=True`` can themselves be differentiated (double backprop).

The graph is implicit: each non-leaf :class:`Tensor` keeps a reference to
the :class:`Node` that produced it, and nodes reference their inputs.  A
graph therefore lives exactly as long as the tensors that reference it,
which in the trainer is one optimisation step.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

__all__ = [
    "Tensor",
    "ContractViolation",
    "tensor",
    "grad",
    "no_grad",
    "is_grad_enabled",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "exp",
    "log",
    "sqrt",
    "power",
    "sigmoid",
    "softplus",
    "relu",
    "tsum",
    "mean",
    "tmax",
    "reshape",
    "transpose",
    "broadcast_to",
    "sum_to",
    "concat",
    "linear_map",
    "im2col",
    "col2im",
    "logsumexp",
    "log_softmax",
    "softmax",
    "detach",
]


class ContractViolation(ValueError):
    """Raised when an operation is called outside its documented contract."""


_GRAD_ENABLED = True
_NODE_IDS = itertools.count()


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Node:
    """Record of one operation: its inputs and the rule mapping the output
    gradient to input gradients."""

    __slots__ = ("id", "op", "inputs", "backward")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], backward: Callable):
        self.id = next(_NODE_IDS)
        self.op = op
        self.inputs = inputs
        self.backward = backward


class Tensor:
    """An n-dimensional float64 array that may participate in a graph."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.node: Node | None = None
        # leaves get a stable id so they can be used as ``wrt`` targets
        self._leaf_id = next(_NODE_IDS)

    # -- basic properties -------------------------------------------------
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
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar ---------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        return power(self, p)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
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
        return transpose(self, None)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def detach(x: Tensor) -> Tensor:
    return Tensor(_as_tensor(x).data)


def _make(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, tuple(inputs), backward)
    return out


# ---------------------------------------------------------------------------
# broadcasting helpers
# ---------------------------------------------------------------------------

def _reduce_axes(from_shape: tuple[int, ...], to_shape: tuple[int, ...]):
    lead = len(from_shape) - len(to_shape)
    if lead < 0:
        raise ContractViolation(f"cannot reduce {from_shape} to {to_shape}")
    axes = list(range(lead))
    for i, n in enumerate(to_shape):
        f = from_shape[lead + i]
        if n == 1 and f != 1:
            axes.append(lead + i)
        elif n != f:
            raise ContractViolation(f"cannot reduce {from_shape} to {to_shape}")
    return tuple(axes), lead


def sum_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Sum ``x`` down to ``shape`` (the adjoint of broadcasting)."""
    x = _as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    axes, lead = _reduce_axes(x.shape, shape)
    data = x.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])
    data = data.reshape(shape)
    src = x.shape
    return _make(data, "sum_to", (x,), lambda g: (broadcast_to(g, src),))


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    if x.shape == shape:
        return x
    try:
        data = np.broadcast_to(x.data, shape).copy()
    except ValueError as exc:
        raise ContractViolation(str(exc)) from None
    src = x.shape
    return _make(data, "broadcast_to", (x,), lambda g: (sum_to(g, src),))


def _broadcast_shape(a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ContractViolation(f"shape mismatch: {a.shape} vs {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, "add", (a, b), lambda g: (sum_to(g, sa), sum_to(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, "sub", (a, b), lambda g: (sum_to(g, sa), sum_to(neg(g), sb)))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, "neg", (a,), lambda g: (neg(g),))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape
    return _make(
        a.data * b.data, "mul", (a, b),
        lambda g: (lambda: sum_to(mul(g, b), sa), lambda: sum_to(mul(g, a), sb)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return (lambda: sum_to(div(g, b), sa),
                lambda: sum_to(neg(div(mul(div(g, b), a), b)), sb))

    return _make(a.data / b.data, "div", (a, b), backward)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    holder: list[Tensor] = []

    def backward(g):
        return (mul(g, holder[0]),)

    out = _make(np.exp(a.data), "exp", (a,), backward)
    holder.append(out)
    return out


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0):
        raise ArithmeticError("log of negative value")
    with np.errstate(divide="ignore"):
        data = np.log(a.data)
    return _make(data, "log", (a,), lambda g: (div(g, a),))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0):
        raise ArithmeticError("sqrt of negative value")
    holder: list[Tensor] = []

    def backward(g):
        return (div(g, mul(2.0, holder[0])),)

    out = _make(np.sqrt(a.data), "sqrt", (a,), backward)
    holder.append(out)
    return out


def power(a, p: float) -> Tensor:
    """Elementwise ``a ** p`` for a constant scalar exponent."""
    a = _as_tensor(a)
    p = float(p)
    if p == 2.0:
        return mul(a, a)

    def backward(g):
        return (mul(g, mul(p, power(a, p - 1.0))),)

    return _make(np.power(a.data, p), "power", (a,), backward)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    data = np.empty_like(a.data)
    pos = a.data >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
    e = np.exp(a.data[~pos])
    data[~pos] = e / (1.0 + e)
    holder: list[Tensor] = []

    def backward(g):
        s = holder[0]
        return (mul(g, mul(s, sub(1.0, s))),)

    out = _make(data, "sigmoid", (a,), backward)
    holder.append(out)
    return out


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    data = np.logaddexp(0.0, a.data)
    return _make(data, "softplus", (a,), lambda g: (mul(g, sigmoid(a)),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = (a.data > 0).astype(np.float64)
    # mask is a constant: the second derivative of relu is zero a.e.
    return _make(a.data * mask, "relu", (a,), lambda g: (mul(g, mask),))


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)
    src = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(src))

    def backward(g):
        return (broadcast_to(reshape(g, kept), src),)

    return _make(np.asarray(data), "sum", (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(tsum(a, axis=axes, keepdims=keepdims), 1.0 / count)


def tmax(a, axis=None, keepdims: bool = False) -> Tensor:
    """Max reduction; the gradient is split evenly among tied maxima."""
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    m = a.data.max(axis=axes, keepdims=True)
    mask = (a.data == m).astype(np.float64)
    mask /= mask.sum(axis=axes, keepdims=True)
    data = m if keepdims else m.reshape([n for i, n in enumerate(a.shape) if i not in axes])
    src = a.shape
    kept = m.shape

    def backward(g):
        return (mul(broadcast_to(reshape(g, kept), src), mask),)

    return _make(np.asarray(data), "max", (a,), backward)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    src = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ContractViolation(str(exc)) from None
    return _make(data, "reshape", (a,), lambda g: (reshape(g, src),))


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(
        np.ascontiguousarray(a.data.transpose(axes)), "transpose", (a,),
        lambda g: (transpose(g, inv),),
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    data = np.concatenate([t.data for t in ts], axis=axis)
    ax = axis % data.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def backward(g):
        return tuple(_slice_axis(g, ax, int(lo), int(hi)) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(data, "concat", ts, backward)


def _slice_axis(a: Tensor, axis: int, lo: int, hi: int) -> Tensor:
    src = a.shape
    index = [slice(None)] * a.ndim
    index[axis] = slice(lo, hi)
    index = tuple(index)
    pad = [(0, 0)] * a.ndim
    pad[axis] = (lo, src[axis] - hi)

    def backward(g):
        return (_pad_axis(g, pad),)

    return _make(a.data[index].copy(), "slice", (a,), backward)


def _pad_axis(a: Tensor, pad) -> Tensor:
    axis = next(i for i, p in enumerate(pad) if p != (0, 0)) if any(p != (0, 0) for p in pad) else 0
    lo, after = pad[axis]
    hi = a.shape[axis] + lo

    def backward(g):
        return (_slice_axis(g, axis, lo, hi),)

    return _make(np.pad(a.data, pad), "pad", (a,), backward)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy's batch semantics for ndim >= 2.

    A batched operand against a plain matrix is folded into one 2-D BLAS
    call instead of a per-batch loop.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractViolation("matmul expects operands with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ContractViolation(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        return _matmul_batch_left(a, b)
    if a.ndim == 2 and b.ndim > 2:
        return _matmul_batch_right(a, b)
    sa, sb = a.shape, b.shape

    def backward(g):
        return (lambda: sum_to(matmul(g, _swap_last(b)), sa),
                lambda: sum_to(matmul(_swap_last(a), g), sb))

    return _make(np.matmul(a.data, b.data), "matmul", (a, b), backward)


def _matmul_batch_left(a: Tensor, b: Tensor) -> Tensor:
    # (..., m, k) @ (k, n)
    k, n = b.shape
    data = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (n,))

    def backward(g):
        return (lambda: matmul(g, transpose(b, None)),
                lambda: matmul(transpose(reshape(a, (-1, k)), None), reshape(g, (-1, n))))

    return _make(data, "matmul", (a, b), backward)


def _matmul_batch_right(a: Tensor, b: Tensor) -> Tensor:
    # (m, k) @ (..., k, n): move k to the front and do one product
    m, k = a.shape
    nd = b.ndim
    front = (nd - 2,) + tuple(range(nd - 2)) + (nd - 1,)
    bt = np.moveaxis(b.data, -2, 0)
    data = (a.data @ bt.reshape(k, -1)).reshape((m,) + bt.shape[1:])
    data = np.ascontiguousarray(np.moveaxis(data, 0, -2))

    def backward(g):
        def ga():
            gt = reshape(transpose(g, front), (m, -1))
            bf = reshape(transpose(b, front), (k, -1))
            return matmul(gt, transpose(bf, None))

        return ga, lambda: matmul(transpose(a, None), g)

    return _make(data, "matmul", (a, b), backward)


def _swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


def linear_map(a, mat: sp.spmatrix, mat_t: sp.spmatrix | None = None) -> Tensor:
    """Apply a constant (sparse) matrix along the last axis: ``a @ mat``.

    Used for gather-style layers (im2col, pooling) whose adjoint is the
    transposed matrix; being linear, the rule is closed under differentiation.
    """
    a = _as_tensor(a)
    mat = sp.csr_matrix(mat)
    if a.shape[-1] != mat.shape[0]:
        raise ContractViolation(f"linear_map shape mismatch: {a.shape} vs {mat.shape}")
    if mat_t is None:
        mat_t = sp.csr_matrix(mat.T)
    lead = a.shape[:-1]
    flat = a.data.reshape(-1, mat.shape[0])
    data = np.asarray((mat.T @ flat.T).T).reshape(lead + (mat.shape[1],))
    return _make(data, "linear_map", (a,), lambda g: (linear_map(g, mat_t, mat),))


def im2col(x, k: int) -> Tensor:
    """Stride-1, zero-padded ("same") patches of a channels-last batch.

    ``(n, h, w, c) -> (n, h*w, k*k*c)`` with features ordered (dy, dx, c).
    Linear; its adjoint is :func:`col2im`.
    """
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ContractViolation(f"im2col expects (n, h, w, c), got {x.shape}")
    n, h, w, c = x.shape
    p = k // 2
    xp = np.pad(x.data, ((0, 0), (p, k - 1 - p), (p, k - 1 - p), (0, 0)))
    out = np.empty((n, h, w, k * k, c))
    for dy in range(k):
        for dx in range(k):
            out[:, :, :, dy * k + dx, :] = xp[:, dy:dy + h, dx:dx + w, :]
    shape = x.shape
    return _make(out.reshape(n, h * w, k * k * c), "im2col", (x,), lambda g: (col2im(g, shape, k),))


def col2im(cols, shape: tuple[int, int, int, int], k: int) -> Tensor:
    """Adjoint of :func:`im2col`: scatter-add patches back onto the image."""
    cols = _as_tensor(cols)
    n, h, w, c = shape
    p = k // 2
    g = cols.data.reshape(n, h, w, k * k, c)
    out = np.zeros((n, h + k - 1, w + k - 1, c))
    for dy in range(k):
        for dx in range(k):
            out[:, dy:dy + h, dx:dx + w, :] += g[:, :, :, dy * k + dx, :]
    data = np.ascontiguousarray(out[:, p:p + h, p:p + w, :])
    return _make(data, "col2im", (cols,), lambda gr: (im2col(gr, k),))


# ---------------------------------------------------------------------------
# composite helpers
# ---------------------------------------------------------------------------

def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    # the shift is a constant; the result does not depend on it mathematically
    shift = Tensor(a.data.max(axis=axis, keepdims=True))
    out = add(log(tsum(exp(sub(a, shift)), axis=axis, keepdims=True)), shift)
    if not keepdims:
        out = reshape(out, tuple(n for i, n in enumerate(out.shape) if i != axis % a.ndim))
    return out


def log_softmax(a, axis: int = -1) -> Tensor:
    return sub(a, logsumexp(a, axis=axis, keepdims=True))


def softmax(a, axis: int = -1) -> Tensor:
    return exp(log_softmax(a, axis=axis))


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _key(t: Tensor) -> int:
    return t.node.id if t.node is not None else t._leaf_id


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, done = stack.pop()
        k = _key(t)
        if done:
            order.append(t)
            continue
        if k in seen:
            continue
        seen.add(k)
        stack.append((t, True))
        if t.node is not None:
            for inp in reversed(t.node.inputs):
                if inp.requires_grad and _key(inp) not in seen:
                    stack.append((inp, False))
    return order


def grad(root: Tensor, wrt: Sequence[Tensor] | Tensor, create_graph: bool = False,
         allow_unused: bool = False) -> list[Tensor]:
    """Gradients of scalar ``root`` with respect to each tensor in ``wrt``.

    With ``create_graph`` the returned tensors are graph nodes and can be
    differentiated again.  Tensors unreachable from ``root`` are an
    error unless ``allow_unused`` is set, in which case they receive zeros.
    """
    single = isinstance(wrt, Tensor)
    targets = [wrt] if single else list(wrt)
    if root.size != 1:
        raise ContractViolation(f"backward root must be scalar, got shape {root.shape}")
    for t in targets:
        if not isinstance(t, Tensor) or not t.is_leaf:
            raise ContractViolation("every wrt tensor must be a graph leaf")
        if not t.requires_grad:
            raise ContractViolation("wrt tensor does not require grad")

    order = _toposort(root) if root.requires_grad else []
    reachable = {_key(t) for t in order}
    missing = [t for t in targets if _key(t) not in reachable]
    if missing and not allow_unused:
        raise ContractViolation("wrt tensor not in graph")

    # only nodes with a path down to some wrt leaf need their gradient
    needed = {_key(t) for t in targets}
    for t in order:
        if t.node is not None and any(_key(i) in needed for i in t.node.inputs):
            needed.add(_key(t))

    grads: dict[int, Tensor] = {}
    ctx = contextlib.nullcontext() if create_graph else no_grad()
    with ctx:
        if order:
            grads[_key(root)] = Tensor(np.ones_like(root.data))
        for t in reversed(order):
            g = grads.pop(_key(t), None) if t.node is not None else grads.get(_key(t))
            if g is None or t.node is None or _key(t) not in needed:
                continue
            in_grads = t.node.backward(g)
            for inp, gi in zip(t.node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                k = _key(inp)
                if k not in needed:
                    continue
                if callable(gi):
                    gi = gi()
                grads[k] = add(grads[k], gi) if k in grads else gi
    out = []
    for t in targets:
        g = grads.get(_key(t))
        out.append(g if g is not None else Tensor(np.zeros_like(t.data)))
    return out[0] if single else out
