"""Define-by-run reverse-mode autodiff over numpy arrays.

A :class:`Tape` records every differentiable op applied to tracked tensors.
Node ids grow monotonically, so every input id is smaller than its consumer's
id and :meth:`Tape.backward` can sweep ids in decreasing order.

Ops accept batched operands. Binary elementwise ops broadcast like numpy and
reduce gradients back to each operand's shape.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import ContractError, DegenerateAttentionError, DimensionError, NumericError

DTYPES = {"float64": np.float64, "float32": np.float32}


class Tensor:
    """An array plus an optional handle into the tape that produced it."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape: "Tape | None" = None, node_id: int | None = None):
        self.data = np.asarray(data)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def tracked(self) -> bool:
        return self.node_id is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, node={self.node_id})"

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


@dataclass
class Node:
    kind: str
    inputs: tuple[int | None, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    param: str | None = None


@dataclass
class Tape:
    """Append-only op record. Rebuilt for every forward pass."""

    dtype: type = np.float64
    check_finite: bool = True
    nodes: list[Node] = field(default_factory=list)
    grads: dict[int, np.ndarray] = field(default_factory=dict)
    _params: dict[str, Tensor] = field(default_factory=dict)

    def leaf(self, value, name: str | None = None) -> Tensor:
        data = np.asarray(value, dtype=self.dtype)
        self.nodes.append(Node("leaf", (), None, name))
        return Tensor(data, self, len(self.nodes) - 1)

    def param(self, store, name: str) -> Tensor:
        """Leaf bound to a ParamStore entry; one node per name per tape."""
        t = self._params.get(name)
        if t is None:
            t = self.leaf(store.value(name), name)
            self._params[name] = t
        return t

    def record(self, kind: str, value: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
        if self.check_finite and not np.isfinite(value).all():
            raise NumericError(f"non-finite value produced by op '{kind}'")
        ids = tuple(t.node_id if t.tape is self else None for t in inputs)
        self.nodes.append(Node(kind, ids, backward))
        return Tensor(value, self, len(self.nodes) - 1)

    def backward(self, loss: Tensor, store=None, retain: bool = False) -> dict[int, np.ndarray]:
        """Propagate d(loss)/d(node) and optionally add parameter gradients into ``store``.

        Gradients of leaves are always kept in :attr:`grads`; intermediate ones only
        with ``retain=True``.
        """
        if loss.tape is not self or loss.node_id is None:
            raise ContractError("loss is not recorded on this tape")
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for nid in range(loss.node_id, -1, -1):
            g = grads.get(nid)
            node = self.nodes[nid]
            if g is None or node.backward is None:
                continue
            in_grads = node.backward(g)
            for src, gi in zip(node.inputs, in_grads):
                if src is None or gi is None:
                    continue
                if self.check_finite and not np.isfinite(gi).all():
                    raise NumericError(f"non-finite gradient flowing out of op '{node.kind}' (node {nid})")
                prev = grads.get(src)
                grads[src] = gi if prev is None else prev + gi
            if not retain and nid != loss.node_id:
                del grads[nid]
        self.grads = grads
        if store is not None:
            for name, t in self._params.items():
                g = grads.get(t.node_id)
                if g is not None:
                    store.accumulate(name, g)
        return grads

    def grad_of(self, t: Tensor) -> np.ndarray:
        g = self.grads.get(t.node_id)
        return np.zeros_like(t.data) if g is None else g


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _lift(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else np.float64
    return Tensor(np.asarray(x, dtype=dtype))


def _tape_of(*ts: Tensor) -> Tape | None:
    for t in ts:
        if t.tape is not None and t.node_id is not None:
            return t.tape
    return None


def _emit(kind: str, value: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    tape = _tape_of(*inputs)
    if tape is None:
        if not np.isfinite(value).all():
            raise NumericError(f"non-finite value produced by op '{kind}'")
        return Tensor(value)
    return tape.record(kind, value, inputs, backward)


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


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim == 0 or b.ndim == 0 or (a.ndim == 1 and b.ndim == 1):
        raise DimensionError(f"matmul needs matrix operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    A, B = a.data, b.data
    out = np.matmul(A, B)

    def backward(g):
        a2 = A[None, :] if A.ndim == 1 else A
        b2 = B[:, None] if B.ndim == 1 else B
        g2 = g
        if A.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if B.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = np.matmul(g2, np.swapaxes(b2, -1, -2))
        if b2.ndim == 2 and a2.ndim > 2:
            k, n = b2.shape
            gb = a2.reshape(-1, k).T @ g2.reshape(-1, n)
        else:
            gb = np.matmul(np.swapaxes(a2, -1, -2), g2)
        ga = unbroadcast(ga, a2.shape).reshape(A.shape)
        gb = unbroadcast(gb, b2.shape).reshape(B.shape)
        return ga, gb

    return _emit("matmul", out, (a, b), backward)


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` with weights stored (in, out)."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a = _lift(a, b if isinstance(b, Tensor) else None)
    b = _lift(b, a)
    _broadcast_shape("mul", a, b)
    A, B = a.data, b.data
    return _emit("mul", A * B, (a, b), lambda g: (unbroadcast(g * B, A.shape), unbroadcast(g * A, B.shape)))


def scale(a, s: float) -> Tensor:
    a = _lift(a)
    s = float(s)
    return _emit("scale", a.data * s, (a,), lambda g: (g * s,))


def sigmoid(a) -> Tensor:
    a = _lift(a)
    y = 1.0 / (1.0 + np.exp(-a.data))
    return _emit("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a) -> Tensor:
    a = _lift(a)
    y = np.tanh(a.data)
    return _emit("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a) -> Tensor:
    a = _lift(a)
    pos = a.data > 0
    return _emit("relu", np.where(pos, a.data, 0.0), (a,), lambda g: (np.where(pos, g, 0.0),))


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch by name: add, sub, mul, scale (``b`` is the factor), sigmoid, tanh, relu."""
    if kind in _BINARY:
        if b is None:
            raise ContractError(f"elementwise '{kind}' needs two operands")
        return _BINARY[kind](a, b)
    if kind == "scale":
        return scale(a, 1.0 if b is None else b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    raise ContractError(f"unknown elementwise kind '{kind}'")


# --------------------------------------------------------------------------
# shape ops
# --------------------------------------------------------------------------


def concat_last(*ts) -> Tensor:
    ts = [_lift(t) for t in ts]
    lead = ts[0].shape[:-1]
    for t in ts[1:]:
        if t.shape[:-1] != lead:
            raise DimensionError(f"concat_last leading extents differ: {[t.shape for t in ts]}")
    widths = [t.shape[-1] for t in ts]
    cuts = np.cumsum(widths)[:-1]
    out = np.concatenate([t.data for t in ts], axis=-1)
    return _emit("concat", out, ts, lambda g: tuple(np.split(g, cuts, axis=-1)))


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = _lift(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {src} to {tuple(shape)}") from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(src),))


def broadcast_to(a, shape: Sequence[int]) -> Tensor:
    a = _lift(a)
    src = a.shape
    try:
        out = np.broadcast_to(a.data, tuple(shape)).copy()
    except ValueError:
        raise DimensionError(f"cannot broadcast {src} to {tuple(shape)}") from None
    return _emit("broadcast", out, (a,), lambda g: (unbroadcast(g, src),))


def slice_last(a, start: int, stop: int) -> Tensor:
    a = _lift(a)
    src = a.shape

    def backward(g):
        full = np.zeros(src, dtype=g.dtype)
        full[..., start:stop] = g
        return (full,)

    return _emit("slice", a.data[..., start:stop], (a,), backward)


def select(a, axis: int, index: int) -> Tensor:
    """``a`` indexed at ``index`` along ``axis`` (axis removed)."""
    a = _lift(a)
    src = a.shape

    def backward(g):
        full = np.zeros(src, dtype=g.dtype)
        sl = [slice(None)] * len(src)
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return _emit("select", np.take(a.data, index, axis=axis), (a,), backward)


def stack(ts: Sequence, axis: int = 0) -> Tensor:
    ts = [_lift(t) for t in ts]
    out = np.stack([t.data for t in ts], axis=axis)
    n = len(ts)
    return _emit("stack", out, ts, lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def sum_all(a) -> Tensor:
    a = _lift(a)
    src = a.shape
    return _emit("sum", np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, src).copy(),))


def mean_all(a) -> Tensor:
    a = _lift(a)
    src, n = a.shape, a.data.size
    return _emit("mean", np.asarray(a.data.mean()), (a,), lambda g: (np.full(src, g / n, dtype=a.data.dtype),))


def take_rows(table, idx) -> Tensor:
    """Gather rows of a 2-D table; index 0 (padding) never receives gradient."""
    table = _lift(table)
    idx = np.asarray(idx, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"take_rows needs a 2-D table, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise DimensionError(f"row index out of range for table of {table.shape[0]} rows")
    src = table.shape

    def backward(g):
        full = np.zeros(src, dtype=g.dtype)
        flat = np.ascontiguousarray(g.reshape(-1, src[1]))
        kernels.scatter_add_rows(full, np.ascontiguousarray(idx.reshape(-1)), flat, 0)
        return (full,)

    return _emit("take_rows", table.data[idx], (table,), backward)


# --------------------------------------------------------------------------
# attention primitives
# --------------------------------------------------------------------------


def softmax_rows(a, mask=None) -> Tensor:
    """Softmax over the last axis; ``mask`` (bool, same shape) marks valid slots.

    Masked slots come out exactly 0. A row with no valid slot raises
    :class:`DegenerateAttentionError`.
    """
    a = _lift(a)
    if a.ndim == 0 or a.shape[-1] < 1:
        raise DimensionError(f"softmax_rows needs at least one column, got {a.shape}")
    c = a.shape[-1]
    x2 = np.ascontiguousarray(a.data.reshape(-1, c))
    m2 = None
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != a.shape:
            try:
                mask = np.broadcast_to(mask, a.shape)
            except ValueError:
                raise DimensionError(f"mask shape {mask.shape} does not fit {a.shape}") from None
        m2 = np.ascontiguousarray(mask.reshape(-1, c))
        if not m2.any(axis=1).all():
            raise DegenerateAttentionError("softmax row has no valid (unmasked) entry")
    p2 = kernels.softmax_fwd(x2, m2)
    p = p2.reshape(a.shape)

    def backward(g):
        g2 = np.ascontiguousarray(g.reshape(-1, c))
        return (kernels.softmax_bwd(p2, g2).reshape(p.shape),)

    return _emit("softmax", p, (a,), backward)


def weighted_sum(weights, rows) -> Tensor:
    """Sum over ``r`` of ``weights[..., r] * rows[..., r, :]``."""
    w, x = _lift(weights), _lift(rows)
    if w.ndim < 1 or x.ndim < 2 or w.shape[-1] != x.shape[-2]:
        raise DimensionError(f"weighted_sum: {w.shape} weights against {x.shape} rows")
    W, X = w.data, x.data
    out = np.matmul(W[..., None, :], X)[..., 0, :]

    def backward(g):
        gw = np.matmul(X, g[..., :, None])[..., 0]
        gx = W[..., :, None] * g[..., None, :]
        return unbroadcast(gw, W.shape), unbroadcast(gx, X.shape)

    return _emit("weighted_sum", out, (w, x), backward)


# --------------------------------------------------------------------------
# fused ops
# --------------------------------------------------------------------------


def lstm_pointwise(gates, c_prev) -> Tensor:
    """Fused LSTM state update. ``gates`` is (n, 4h) ordered i, f, g, o.

    Returns (n, 2h) holding ``[h, c]``.
    """
    gates, c_prev = _lift(gates), _lift(c_prev, gates)
    n, h4 = gates.shape
    if h4 % 4 or c_prev.shape != (n, h4 // 4):
        raise DimensionError(f"lstm_pointwise: gates {gates.shape} vs cell {c_prev.shape}")
    G = np.ascontiguousarray(gates.data)
    C = np.ascontiguousarray(c_prev.data)
    out, act = kernels.lstm_fwd(G, C)

    def backward(g):
        return kernels.lstm_bwd(act, C, np.ascontiguousarray(g))

    return _emit("lstm", out, (gates, c_prev), backward)


def cross_entropy(logits, labels, eps: float = 1e-12) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    z = _lift(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise DimensionError(f"cross_entropy: logits {z.shape} vs labels {labels.shape}")
    n, c = z.shape
    shifted = z.data - z.data.max(axis=1, keepdims=True)
    p = np.exp(shifted)
    p /= p.sum(axis=1, keepdims=True)
    picked = p[np.arange(n), labels]
    loss = -np.log(np.maximum(picked, eps)).mean()

    def backward(g):
        d = p.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (g / n),)

    return _emit("cross_entropy", np.asarray(loss, dtype=z.data.dtype), (z,), backward)
