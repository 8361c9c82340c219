"""Dense float64 tensors with a define-by-run reverse-mode gradient tape.

Every differentiable primitive used by the model lives here.  A primitive
computes its forward value with numpy and, when a :class:`GradTape` is
active and at least one input is tracked, appends a node holding a
closure that maps the output gradient to input gradients.

Shapes never broadcast implicitly.  The only mixed-shape interactions are
scalar-with-tensor arithmetic and the explicitly named helpers
(:func:`add_bias`, :func:`where_rows`, matrix products against a shared
2-D right operand).
"""

from __future__ import annotations

import itertools
import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ContractError",
    "DimensionError",
    "GradTape",
    "NumericError",
    "Tensor",
    "active_tape",
    "add",
    "add_bias",
    "backward",
    "concat",
    "dropout",
    "layer_norm",
    "log_softmax",
    "matmul",
    "mean",
    "mul",
    "pick",
    "relu",
    "reshape",
    "sigmoid",
    "softmax",
    "sqdist",
    "stack",
    "sub",
    "sum",
    "take",
    "tanh",
    "transpose",
    "where_rows",
]


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """Raised on NaN inputs to numerically sensitive primitives."""


class ContractError(RuntimeError):
    """Raised when a caller violates a documented precondition."""


_local = threading.local()
_serials = itertools.count(1)

# Test-only: op name -> callable(list_of_grads) -> list_of_grads, applied
# after the op's own backward.  Used to verify that gradient checks catch
# a broken backward rule.
BACKWARD_HOOKS: dict[str, Callable[[list], list]] = {}


def active_tape() -> GradTape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """An n-dimensional float64 array that may participate in a tape.

    ``requires_grad`` marks a leaf (a parameter); leaves accumulate into
    ``grad`` on every backward sweep.  Results of recorded primitives carry
    ``tape_id = (tape serial, node index)``.
    """

    __slots__ = ("data", "grad", "requires_grad", "tape_id", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape_id: tuple[int, int] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None if self.grad is None else np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # arithmetic sugar
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
        if isinstance(other, Tensor):
            raise DimensionError("division is only defined by a python scalar")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class GradTape:
    """Append-only record of primitive ops, rebuilt for every forward pass.

    Use as a context manager; primitives evaluated inside the block are
    recorded when any of their inputs is a parameter or an earlier result
    on this tape.
    """

    def __init__(self):
        self.serial = next(_serials)
        self.nodes: list[_Node] = []
        self.params: dict[int, Tensor] = {}

    def __enter__(self) -> GradTape:
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]

    def op_inputs(self, op: str) -> list[tuple[Tensor, ...]]:
        return [n.inputs for n in self.nodes if n.op == op]

    def _tracked(self, t: Tensor) -> bool:
        return t.requires_grad or (t.tape_id is not None and t.tape_id[0] == self.serial)

    def record(self, op: str, out: np.ndarray, inputs: tuple, backward) -> Tensor:
        if not any(self._tracked(t) for t in inputs):
            return Tensor(out)
        result = Tensor(out)
        result.tape_id = (self.serial, len(self.nodes))
        for t in inputs:
            if t.requires_grad and t.tape_id is None:
                self.params.setdefault(id(t), t)
        self.nodes.append(_Node(op, inputs, result, backward))
        return result

    def backward(self, loss: Tensor) -> None:
        """Reverse sweep from a scalar ``loss``; parameter grads accumulate."""
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape_id is None or loss.tape_id[0] != self.serial:
            raise ContractError("loss was not produced on this tape")
        start = loss.tape_id[1]
        pending: dict[int, np.ndarray] = {start: np.ones_like(loss.data)}
        for idx in range(start, -1, -1):
            g = pending.pop(idx, None)
            if g is None:
                continue
            node = self.nodes[idx]
            node.output.grad = g
            grads = node.backward(g)
            hook = BACKWARD_HOOKS.get(node.op)
            if hook is not None:
                grads = hook(list(grads))
            for t, gi in zip(node.inputs, grads):
                if gi is None:
                    continue
                if t.requires_grad and t.tape_id is None:
                    if t.grad is None:
                        t.grad = np.array(gi, dtype=np.float64, copy=True).reshape(t.shape)
                    else:
                        t.grad += gi
                elif t.tape_id is not None and t.tape_id[0] == self.serial:
                    j = t.tape_id[1]
                    pending[j] = gi if j not in pending else pending[j] + gi
        for p in self.params.values():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out: np.ndarray, inputs: tuple, backward) -> Tensor:
    tape = active_tape()
    if tape is None:
        return Tensor(out)
    return tape.record(op, out, inputs, backward)


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer))


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unscalar(g: np.ndarray, shape: tuple) -> np.ndarray:
    return np.asarray(g.sum()) if shape == () and g.shape != () else g


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    if _is_scalar(b):
        a = _as_tensor(a)
        return _record("add", a.data + b, (a,), lambda g: (g,))
    if _is_scalar(a):
        return add(b, a)
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("add", a, b)
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b), lambda g: (_unscalar(g, sa), _unscalar(g, sb)))


def sub(a, b) -> Tensor:
    if _is_scalar(b):
        return add(a, -float(b))
    if _is_scalar(a):
        b = _as_tensor(b)
        return _record("sub", a - b.data, (b,), lambda g: (-g,))
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b), lambda g: (_unscalar(g, sa), -_unscalar(g, sb)))


def mul(a, b) -> Tensor:
    if _is_scalar(b):
        a = _as_tensor(a)
        s = float(b)
        return _record("mul", a.data * s, (a,), lambda g: (g * s,))
    if _is_scalar(a):
        return mul(b, a)
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same("mul", a, b)
    A, B = a.data, b.data
    sa, sb = a.shape, b.shape
    return _record(
        "mul", A * B, (a, b), lambda g: (_unscalar(g * B, sa), _unscalar(g * A, sb))
    )


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """``x[..., n] + bias[n]``, the bias repeated over every leading index."""
    if bias.ndim != 1 or x.shape[-1:] != bias.shape:
        raise DimensionError(f"add_bias: shape mismatch {x.shape} vs {bias.shape}")
    n = bias.shape[0]
    return _record(
        "add_bias", x.data + bias.data, (x, bias), lambda g: (g, g.reshape(-1, n).sum(axis=0))
    )


def where_rows(mask, a: Tensor, b: Tensor) -> Tensor:
    """Row ``i`` comes from ``a`` where ``mask[i]`` is true, else from ``b``."""
    m = np.asarray(mask, dtype=bool)
    if a.shape != b.shape or m.shape != a.shape[:1]:
        raise DimensionError(f"where_rows: shapes {m.shape}, {a.shape}, {b.shape}")
    mk = m.reshape((-1,) + (1,) * (a.ndim - 1))
    return _record(
        "where_rows",
        np.where(mk, a.data, b.data),
        (a, b),
        lambda g: (np.where(mk, g, 0.0), np.where(mk, 0.0, g)),
    )


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _record("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _record("relu", np.where(pos, x.data, 0.0), (x,), lambda g: (np.where(pos, g, 0.0),))


# ---------------------------------------------------------------------------
# products and structure


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy semantics restricted to explicit cases.

    Supported: vector/matrix operands, stacks of matrices with identical
    leading extents, and a stack of matrices times one shared matrix.
    """
    A, B = a.data, b.data
    if A.ndim == 0 or B.ndim == 0:
        raise DimensionError(f"matmul: scalar operand {A.shape} x {B.shape}")
    inner_b = B.shape[0] if B.ndim == 1 else B.shape[-2]
    if A.shape[-1] != inner_b:
        raise DimensionError(f"matmul: shape mismatch {A.shape} x {B.shape}")
    if B.ndim > 2 and A.shape[:-2] != B.shape[:-2]:
        raise DimensionError(f"matmul: batch extents differ {A.shape} x {B.shape}")
    out = A @ B

    def backward(g):
        A2 = A if A.ndim > 1 else A[None, :]
        B2 = B if B.ndim > 1 else B[:, None]
        g2 = g
        if A.ndim == 1:
            g2 = g2[..., None, :]
        if B.ndim == 1:
            g2 = g2[..., None]
        ga = g2 @ np.swapaxes(B2, -1, -2)
        if B2.ndim == 2 and A2.ndim > 2:
            gb = A2.reshape(-1, A2.shape[-1]).T @ g2.reshape(-1, g2.shape[-1])
        else:
            gb = np.swapaxes(A2, -1, -2) @ g2
        return ga.reshape(A.shape), gb.reshape(B.shape)

    return _record("matmul", out, (a, b), backward)


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    """Permute axes; by default swap the last two (or reverse a matrix)."""
    if axes is None:
        if x.ndim < 2:
            raise DimensionError(f"transpose needs >= 2 dims, got {x.shape}")
        axes = list(range(x.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _record("reshape", out, (x,), lambda g: (g.reshape(old),))


def _is_basic(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (int, np.integer, slice)) or p is Ellipsis for p in parts)


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]
    shape = x.shape
    basic = _is_basic(index)

    def backward(g):
        gx = np.zeros(shape)
        if basic:
            gx[index] = g
        else:
            np.add.at(gx, index, g)
        return (gx,)

    return _record("slice", np.array(out, copy=True), (x,), backward)


def take(table: Tensor, ids) -> Tensor:
    """Gather rows: ``out[...] = table[ids[...]]`` (embedding lookup)."""
    idx = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"take: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ContractError(f"take: id out of range for table of {table.shape[0]} rows")
    shape = table.shape

    def backward(g):
        gt = np.zeros(shape)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, shape[1]))
        return (gt,)

    return _record("take", table.data[idx], (table,), backward)


def pick(x: Tensor, ids) -> Tensor:
    """``out[i] = x[i, ids[i]]`` for a 2-D ``x``."""
    idx = np.asarray(ids, dtype=np.int64)
    if x.ndim != 2 or idx.shape != x.shape[:1]:
        raise DimensionError(f"pick: shapes {x.shape} and {idx.shape}")
    rows = np.arange(x.shape[0])
    shape = x.shape

    def backward(g):
        gx = np.zeros(shape)
        gx[rows, idx] = g
        return (gx,)

    return _record("pick", x.data[rows, idx], (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    ref = datas[0]
    ax = axis % ref.ndim
    for d in datas[1:]:
        if d.ndim != ref.ndim or d.shape[:ax] + d.shape[ax + 1:] != ref.shape[:ax] + ref.shape[ax + 1:]:
            raise DimensionError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    splits = np.cumsum([d.shape[ax] for d in datas])[:-1]
    return _record(
        "concat",
        np.concatenate(datas, axis=ax),
        tuple(tensors),
        lambda g: tuple(np.split(g, splits, axis=ax)),
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes differ {sorted(shapes)}")
    n = len(tensors)
    return _record(
        "stack",
        np.stack([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
    )


# ---------------------------------------------------------------------------
# reductions


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = x.shape
    if axis is None:
        return _record("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),))
    ax = axis % x.ndim
    return _record(
        "sum",
        x.data.sum(axis=ax),
        (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),),
    )


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


def sqdist(a: Tensor, b: Tensor) -> Tensor:
    """Squared euclidean distance ``||a - b||^2`` as a scalar."""
    if a.shape != b.shape:
        raise DimensionError(f"sqdist: shape mismatch {a.shape} vs {b.shape}")
    d = a.data - b.data
    return _record("sqdist", np.asarray(np.dot(d.ravel(), d.ravel())), (a, b), lambda g: (2 * g * d, -2 * g * d))


# ---------------------------------------------------------------------------
# normalisation


def _check_finite(op: str, x: np.ndarray) -> None:
    if np.isnan(x).any():
        raise NumericError(f"{op}: NaN in input")


def softmax(x: Tensor, axis: int = -1, mask=None) -> Tensor:
    """Numerically stable softmax; ``mask`` (true = keep) zeroes entries exactly."""
    _check_finite("softmax", x.data)
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)
    return _record(
        "softmax", s, (x,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),)
    )


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite("log_softmax", x.data)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return _record("log_softmax", out, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis, then scale by ``gamma`` and shift by ``beta``."""
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise DimensionError(f"layer_norm: {x.shape} with gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    G = gamma.data

    def backward(g):
        gh = g * G
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).reshape(-1, n).sum(axis=0), g.reshape(-1, n).sum(axis=0)

    return _record("layer_norm", xhat * G + beta.data, (x, gamma, beta), backward)


def dropout(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; the identity in eval mode or at ``rate == 0``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _record("dropout", x.data * keep, (x,), lambda g: (g * keep,))


def backward(tape: GradTape, loss: Tensor) -> None:
    """Functional spelling of :meth:`GradTape.backward`."""
    tape.backward(loss)
