"""Minimal reverse-mode automatic differentiation over float64 arrays.

A :class:`Tape` records every primitive applied to tensors that were
created through :meth:`Tape.watch` (or derived from them).  Tensors
without a tape are constants: operations on them are evaluated eagerly
and nothing is recorded.  :func:`backward` walks the tape in reverse and
returns a :class:`Gradients` mapping.

Broadcasting is deliberately narrow.  Binary elementwise primitives accept
equal shapes, a 0-d scalar operand, or an operand whose shape is a
trailing suffix of the other's (a leading batch).  Everything else goes
through the explicit ``broadcast`` primitive.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import special

from . import _linalg

__all__ = [
    "Tensor",
    "Tape",
    "Gradients",
    "ShapeError",
    "CholeskyError",
    "NonFiniteError",
    "apply",
    "backward",
    "check_gradient",
    "PRIMITIVES",
]


class ShapeError(ValueError):
    """Operand shapes violate a primitive's contract."""


class CholeskyError(np.linalg.LinAlgError):
    """Matrix is not numerically positive definite.

    ``pivot`` is the column at which the factorization broke down and
    ``batch_index`` the flat index of the offending matrix in a stack.
    """

    def __init__(self, pivot: int, batch_index: int = 0, context: str = ""):
        self.pivot = pivot
        self.batch_index = batch_index
        self.context = context
        msg = f"cholesky failed at pivot {pivot} (matrix {batch_index})"
        if context:
            msg = f"{context}: {msg}"
        super().__init__(msg)


class NonFiniteError(FloatingPointError):
    def __init__(self, op: str):
        self.op = op
        super().__init__(f"non-finite value produced by primitive '{op}'")


# ---------------------------------------------------------------------------
# tensors and tape


class Tensor:
    __slots__ = ("value", "tape", "index", "__weakref__")
    # make ndarray <op> Tensor defer to the reflected Tensor operator
    __array_ufunc__ = None

    def __init__(self, value, tape: "Tape | None" = None, index: int = -1):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.index = index

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> "Tensor":
        return apply("transpose", [self])

    def __repr__(self) -> str:
        tag = "const" if self.tape is None else f"node {self.index}"
        return f"Tensor({self.value!r}, {tag})"

    def __len__(self) -> int:
        return len(self.value)

    def __float__(self) -> float:
        return float(self.value)

    def __add__(self, other):
        return apply("add", [self, other])

    def __radd__(self, other):
        return apply("add", [other, self])

    def __sub__(self, other):
        return apply("sub", [self, other])

    def __rsub__(self, other):
        return apply("sub", [other, self])

    def __mul__(self, other):
        return apply("mul", [self, other])

    def __rmul__(self, other):
        return apply("mul", [other, self])

    def __truediv__(self, other):
        return apply("div", [self, other])

    def __rtruediv__(self, other):
        return apply("div", [other, self])

    def __neg__(self):
        return apply("neg", [self])

    def __matmul__(self, other):
        return apply("matmul", [self, other])

    def __rmatmul__(self, other):
        return apply("matmul", [other, self])

    def __getitem__(self, index):
        return apply("slice", [self], index=index)

    def sum(self, axis=None, keepdims=False):
        return apply("sum", [self], axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return apply("mean", [self], axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return apply("reshape", [self], shape=shape)

    def transpose(self, *axes):
        return apply("transpose", [self], axes=axes or None)


class _Node:
    __slots__ = ("prim", "inputs", "saved", "attrs", "out")

    def __init__(self, prim, inputs, saved, attrs, out):
        self.prim = prim
        self.inputs = inputs
        self.saved = saved
        self.attrs = attrs
        self.out = out


class Tape:
    """Append-only record of primitive applications.

    Nodes are stored in creation order, which is a topological order.
    With ``check_finite`` set every forward value is screened and the
    first non-finite result raises :class:`NonFiniteError` naming the
    primitive.
    """

    def __init__(self, check_finite: bool = False):
        self.nodes: list[_Node | None] = []
        self.check_finite = check_finite

    def __len__(self) -> int:
        return len(self.nodes)

    def watch(self, value) -> Tensor:
        """Register ``value`` as a differentiable leaf."""
        t = Tensor(value, self, len(self.nodes))
        self.nodes.append(None)
        return t

    def watch_all(self, values: dict) -> dict:
        return {k: self.watch(v) for k, v in values.items()}

    def _record(self, prim, inputs, saved, attrs, out) -> Tensor:
        t = Tensor.__new__(Tensor)
        t.value = out
        t.tape = self
        t.index = len(self.nodes)
        self.nodes.append(_Node(prim, inputs, saved, attrs, out))
        return t


class Gradients:
    """Gradient map returned by :func:`backward`."""

    def __init__(self, tape: Tape, grads: list):
        self._tape = tape
        self._grads = grads

    def __getitem__(self, t: Tensor) -> np.ndarray:
        if t.tape is not self._tape:
            raise KeyError("tensor does not belong to this tape")
        g = self._grads[t.index] if t.index < len(self._grads) else None
        if g is None:
            return np.zeros_like(t.value)
        return np.broadcast_to(g, t.shape).copy() if np.shape(g) != t.shape else g

    def __contains__(self, t: Tensor) -> bool:
        return t.tape is self._tape

    def of(self, tensors: dict) -> dict:
        return {k: self[v] for k, v in tensors.items()}


# ---------------------------------------------------------------------------
# primitive registry


@dataclass(frozen=True)
class Primitive:
    name: str
    forward: Callable  # (values, attrs) -> (out, saved)
    backward: Callable  # (g, saved, values, out, attrs) -> list[grad | None]


PRIMITIVES: dict[str, Primitive] = {}


def _register(name):
    def deco(pair):
        fwd, bwd = pair()
        register_primitive(name, fwd, bwd)
        return pair

    return deco


def register_primitive(name: str, forward: Callable, backward: Callable) -> Primitive:
    """Add a primitive; ``backward`` returns one gradient (or None) per input."""
    if name in PRIMITIVES:
        raise ValueError(f"primitive '{name}' is already registered")
    prim = Primitive(name, forward, backward)
    PRIMITIVES[name] = prim
    return prim


def unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    return _unbroadcast(g, shape)


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def apply(op: str, inputs: Sequence, tape: Tape | None = None, **attrs) -> Tensor:
    """Evaluate primitive ``op`` and record it on the inputs' tape.

    ``tape`` may be given explicitly; otherwise it is taken from the
    inputs.  Inputs living on two different tapes are rejected.
    """
    prim = PRIMITIVES.get(op)
    if prim is None:
        raise KeyError(f"unknown primitive '{op}'")
    ts = [x if isinstance(x, Tensor) else Tensor(x) for x in inputs]
    for t in ts:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise ValueError("inputs belong to different tapes")
    out, saved = prim.forward([t.value for t in ts], attrs)
    if tape is None:
        return Tensor(out)
    if tape.check_finite and not np.all(np.isfinite(out)):
        raise NonFiniteError(op)
    return tape._record(prim, ts, saved, attrs, out)


def backward(tape: Tape, root: Tensor) -> Gradients:
    """Reverse sweep from scalar ``root``; returns d root / d node."""
    if root.value.size != 1 or root.value.ndim > 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    if root.tape is not tape:
        raise ValueError("root was not recorded on this tape")
    grads: list = [None] * (root.index + 1)
    grads[root.index] = np.ones_like(root.value)
    nodes = tape.nodes
    for i in range(root.index, -1, -1):
        g = grads[i]
        node = nodes[i]
        if g is None or node is None:
            continue
        in_grads = node.prim.backward(g, node.saved, [t.value for t in node.inputs], node.out, node.attrs)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or t.tape is not tape:
                continue
            j = t.index
            grads[j] = gi if grads[j] is None else grads[j] + gi
    return Gradients(tape, grads)


# ---------------------------------------------------------------------------
# shape helpers


def _binary_shape(a: np.ndarray, b: np.ndarray, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or a.ndim == 0 or b.ndim == 0:
        return
    if a.ndim > b.ndim and sa[a.ndim - b.ndim:] == sb:
        return
    if b.ndim > a.ndim and sb[b.ndim - a.ndim:] == sa:
        return
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, (n, m) in enumerate(zip(shape, g.shape)) if n == 1 and m != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


# ---------------------------------------------------------------------------
# elementwise


@_register("add")
def _():
    def fwd(v, at):
        _binary_shape(v[0], v[1], "add")
        return v[0] + v[1], None

    def bwd(g, s, v, out, at):
        return [_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape)]

    return fwd, bwd


@_register("sub")
def _():
    def fwd(v, at):
        _binary_shape(v[0], v[1], "sub")
        return v[0] - v[1], None

    def bwd(g, s, v, out, at):
        return [_unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape)]

    return fwd, bwd


@_register("mul")
def _():
    def fwd(v, at):
        _binary_shape(v[0], v[1], "mul")
        return v[0] * v[1], None

    def bwd(g, s, v, out, at):
        return [_unbroadcast(g * v[1], v[0].shape), _unbroadcast(g * v[0], v[1].shape)]

    return fwd, bwd


@_register("div")
def _():
    def fwd(v, at):
        _binary_shape(v[0], v[1], "div")
        return v[0] / v[1], None

    def bwd(g, s, v, out, at):
        ga = g / v[1]
        return [_unbroadcast(ga, v[0].shape), _unbroadcast(-ga * out, v[1].shape)]

    return fwd, bwd


@_register("neg")
def _():
    return (lambda v, at: (-v[0], None)), (lambda g, s, v, out, at: [-g])


@_register("exp")
def _():
    return (lambda v, at: (np.exp(v[0]), None)), (lambda g, s, v, out, at: [g * out])


@_register("log")
def _():
    return (lambda v, at: (np.log(v[0]), None)), (lambda g, s, v, out, at: [g / v[0]])


@_register("sqrt")
def _():
    # d sqrt(x) at x == 0 is taken as 0; callers only hit it through
    # squared distances whose own derivative vanishes there.
    def bwd(g, s, v, out, at):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0.0, 0.5 / out, 0.0)
        return [g * d]

    return (lambda v, at: (np.sqrt(v[0]), None)), bwd


@_register("square")
def _():
    return (lambda v, at: (v[0] * v[0], None)), (lambda g, s, v, out, at: [2.0 * g * v[0]])


@_register("softplus")
def _():
    def fwd(v, at):
        x = v[0]
        return np.logaddexp(0.0, x), None

    def bwd(g, s, v, out, at):
        return [g * special.expit(v[0])]

    return fwd, bwd


@_register("leaky_relu")
def _():
    def fwd(v, at):
        a = at.get("alpha", 0.2)
        x = v[0]
        return np.where(x >= 0.0, x, a * x), None

    def bwd(g, s, v, out, at):
        a = at.get("alpha", 0.2)
        return [np.where(v[0] >= 0.0, g, a * g)]

    return fwd, bwd


@_register("clamp_min")
def _():
    # max(x, floor) for a constant floor; gradient passes where x > floor
    def fwd(v, at):
        return np.maximum(v[0], at.get("floor", 0.0)), None

    def bwd(g, s, v, out, at):
        return [np.where(v[0] > at.get("floor", 0.0), g, 0.0)]

    return fwd, bwd


@_register("erf")
def _():
    c = 2.0 / math.sqrt(math.pi)

    def bwd(g, s, v, out, at):
        return [g * c * np.exp(-v[0] * v[0])]

    return (lambda v, at: (special.erf(v[0]), None)), bwd


@_register("log_ndtr")
def _():
    # log of the standard normal CDF, stable in the far left tail
    half_log_2pi = 0.5 * math.log(2.0 * math.pi)

    def bwd(g, s, v, out, at):
        x = v[0]
        return [g * np.exp(-0.5 * x * x - half_log_2pi - out)]

    return (lambda v, at: (special.log_ndtr(v[0]), None)), bwd


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(a % len(shape) for a in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


@_register("sum")
def _():
    def fwd(v, at):
        return np.sum(v[0], axis=at.get("axis"), keepdims=at.get("keepdims", False)), None

    def bwd(g, s, v, out, at):
        return [_expand_reduced(g, v[0].shape, at.get("axis"), at.get("keepdims", False))]

    return fwd, bwd


@_register("mean")
def _():
    def fwd(v, at):
        x = v[0]
        return np.mean(x, axis=at.get("axis"), keepdims=at.get("keepdims", False)), None

    def bwd(g, s, v, out, at):
        count = v[0].size // max(np.size(out), 1) if v[0].size else 1
        return [_expand_reduced(g / count, v[0].shape, at.get("axis"), at.get("keepdims", False))]

    return fwd, bwd


@_register("reshape")
def _():
    def fwd(v, at):
        return v[0].reshape(at["shape"]), None

    def bwd(g, s, v, out, at):
        return [np.reshape(g, v[0].shape)]

    return fwd, bwd


@_register("transpose")
def _():
    def fwd(v, at):
        axes = at.get("axes")
        x = v[0]
        if axes is None:
            if x.ndim < 2:
                raise ShapeError("transpose needs at least 2 dimensions")
            return _swap(x), None
        return np.transpose(x, axes), None

    def bwd(g, s, v, out, at):
        axes = at.get("axes")
        if axes is None:
            return [_swap(g)]
        return [np.transpose(g, np.argsort(axes))]

    return fwd, bwd


@_register("broadcast")
def _():
    def fwd(v, at):
        try:
            return np.broadcast_to(v[0], at["shape"]), None
        except ValueError as e:
            raise ShapeError(f"broadcast: {e}") from None

    def bwd(g, s, v, out, at):
        return [_unbroadcast(g, v[0].shape)]

    return fwd, bwd


@_register("slice")
def _():
    def fwd(v, at):
        return v[0][at["index"]], None

    def bwd(g, s, v, out, at):
        z = np.zeros_like(v[0])
        np.add.at(z, at["index"], g)
        return [z]

    return fwd, bwd


@_register("concat")
def _():
    def fwd(v, at):
        return np.concatenate(v, axis=at.get("axis", 0)), None

    def bwd(g, s, v, out, at):
        axis = at.get("axis", 0)
        cuts = np.cumsum([x.shape[axis] for x in v])[:-1]
        return list(np.split(g, cuts, axis=axis))

    return fwd, bwd


@_register("softmax")
def _():
    def fwd(v, at):
        axis = at.get("axis", -1)
        x = v[0]
        z = np.exp(x - np.max(x, axis=axis, keepdims=True))
        return z / np.sum(z, axis=axis, keepdims=True), None

    def bwd(g, s, v, out, at):
        axis = at.get("axis", -1)
        return [out * (g - np.sum(g * out, axis=axis, keepdims=True))]

    return fwd, bwd


# ---------------------------------------------------------------------------
# linear algebra


def _batch_of(x):
    return x.shape[:-2]


@_register("matmul")
def _():
    def fwd(v, at):
        a, b = v
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
        ba, bb = _batch_of(a), _batch_of(b)
        if not (ba == bb or not ba or not bb
                or ba[len(ba) - len(bb):] == bb or bb[len(bb) - len(ba):] == ba):
            raise ShapeError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}")
        return np.matmul(a, b), None

    def bwd(g, s, v, out, at):
        a, b = v
        if b.ndim == 2 and a.ndim > 2:
            ga = g @ b.T
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return [ga, gb]
        if a.ndim == 2 and b.ndim > 2:
            gb = np.matmul(a.T, g)
            ga = np.matmul(g, _swap(b))
            ga = ga.reshape(-1, *ga.shape[-2:]).sum(axis=0)
            return [ga, gb]
        ga = np.matmul(g, _swap(b))
        gb = np.matmul(_swap(a), g)
        return [_unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)]

    return fwd, bwd


@_register("diag_extract")
def _():
    def fwd(v, at):
        x = v[0]
        if x.ndim < 2 or x.shape[-1] != x.shape[-2]:
            raise ShapeError(f"diag_extract: expected square matrices, got {x.shape}")
        return np.diagonal(x, axis1=-2, axis2=-1).copy(), None

    def bwd(g, s, v, out, at):
        return [_diag_embed(g)]

    return fwd, bwd


def _diag_embed(d: np.ndarray) -> np.ndarray:
    m = d.shape[-1]
    out = np.zeros(d.shape + (m,))
    idx = np.arange(m)
    out[..., idx, idx] = d
    return out


@_register("diag_embed")
def _():
    def fwd(v, at):
        return _diag_embed(v[0]), None

    def bwd(g, s, v, out, at):
        return [np.diagonal(g, axis1=-2, axis2=-1).copy()]

    return fwd, bwd


@_register("cholesky")
def _():
    def fwd(v, at):
        A = v[0]
        if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
            raise ShapeError(f"cholesky: expected square matrices, got {A.shape}")
        sym = 0.5 * (A + _swap(A))
        L, b, j = _linalg.cholesky(sym)
        if b >= 0:
            raise CholeskyError(j, b)
        return L, None

    def bwd(g, s, v, out, at):
        # symmetric adjoint: A_bar = 1/2 L^{-T} (P + P^T) L^{-1},
        # P = Phi(L^T L_bar), Phi = lower triangle with halved diagonal
        L = out
        Linv = _linalg.tri_inv(L)
        P = np.tril(np.matmul(_swap(L), np.tril(g)))
        idx = np.arange(L.shape[-1])
        P[..., idx, idx] *= 0.5
        S = P + _swap(P)
        return [0.5 * np.matmul(np.matmul(_swap(Linv), S), Linv)]

    return fwd, bwd


def _check_tri(L, B, op):
    if L.ndim < 2 or L.shape[-1] != L.shape[-2]:
        raise ShapeError(f"{op}: expected square triangular matrices, got {L.shape}")
    if B.ndim < 2 or B.shape[-2] != L.shape[-1]:
        raise ShapeError(f"{op}: rhs shape {B.shape} does not match {L.shape}")
    lb, bb = _batch_of(L), _batch_of(B)
    if lb != bb and lb:
        raise ShapeError(f"{op}: batch shapes {L.shape} and {B.shape} differ")


def _lower_solve_batched(L, B, transposed=False):
    if L.ndim == 2 and B.ndim > 2:
        L = np.broadcast_to(L, B.shape[:-2] + L.shape)
    if transposed:
        return _linalg.solve_lower_t(L, B)
    return _linalg.solve_lower(L, B)


def _sum_to_matrix(gL, L):
    if gL.ndim > L.ndim:
        gL = gL.reshape(-1, *gL.shape[-2:]).sum(axis=0)
    return gL


@_register("tri_solve_lower")
def _():
    # L^{-1} B; with identity=True the only input is L and the result is L^{-1}
    def fwd(v, at):
        L = v[0]
        if at.get("identity"):
            if L.ndim < 2 or L.shape[-1] != L.shape[-2]:
                raise ShapeError(f"tri_solve_lower: expected square matrices, got {L.shape}")
            return _linalg.tri_inv(L), None
        _check_tri(L, v[1], "tri_solve_lower")
        return _lower_solve_batched(L, v[1]), None

    def bwd(g, s, v, out, at):
        L = v[0]
        X = out
        if at.get("identity"):
            # d(L^{-1}) = -L^{-1} dL L^{-1}
            return [-np.tril(np.matmul(np.matmul(_swap(X), g), _swap(X)))]
        gB = _lower_solve_batched(L, g, transposed=True)
        gL = -np.tril(np.matmul(gB, _swap(X)))
        return [_sum_to_matrix(gL, L), gB]

    return fwd, bwd


@_register("tri_solve_upper")
def _():
    # U^{-1} B with U upper triangular
    def fwd(v, at):
        U, B = v
        _check_tri(U, B, "tri_solve_upper")
        return _lower_solve_batched(np.ascontiguousarray(_swap(U)), B, transposed=True), None

    def bwd(g, s, v, out, at):
        U = v[0]
        gB = _lower_solve_batched(np.ascontiguousarray(_swap(U)), g)  # U^{-T} g
        gU = -np.triu(np.matmul(gB, _swap(out)))
        return [_sum_to_matrix(gU, U), gB]

    return fwd, bwd


@_register("logdet_from_chol")
def _():
    def fwd(v, at):
        d = np.diagonal(v[0], axis1=-2, axis2=-1)
        return 2.0 * np.sum(np.log(d), axis=-1), None

    def bwd(g, s, v, out, at):
        d = np.diagonal(v[0], axis1=-2, axis2=-1)
        return [_diag_embed(2.0 * np.asarray(g)[..., None] / d)]

    return fwd, bwd


# ---------------------------------------------------------------------------
# functional helpers


def exp(x):
    return apply("exp", [x])


def log(x):
    return apply("log", [x])


def sqrt(x):
    return apply("sqrt", [x])


def square(x):
    return apply("square", [x])


def softplus(x):
    return apply("softplus", [x])


def leaky_relu(x, alpha: float = 0.2):
    return apply("leaky_relu", [x], alpha=alpha)


def erf(x):
    return apply("erf", [x])


def clamp_min(x, floor: float = 0.0):
    return apply("clamp_min", [x], floor=float(floor))


def log_ndtr(x):
    return apply("log_ndtr", [x])


def matmul(a, b):
    return apply("matmul", [a, b])


def transpose(x, axes=None):
    return apply("transpose", [x], axes=None if axes is None else tuple(axes))


def reshape(x, shape):
    return apply("reshape", [x], shape=tuple(shape))


def broadcast(x, shape):
    return apply("broadcast", [x], shape=tuple(shape))


def concat(xs, axis: int = 0):
    return apply("concat", list(xs), axis=axis)


def sum(x, axis=None, keepdims=False):  # noqa: A001
    return apply("sum", [x], axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims=False):
    return apply("mean", [x], axis=axis, keepdims=keepdims)


def softmax(x, axis: int = -1):
    return apply("softmax", [x], axis=axis)


def cholesky(A):
    return apply("cholesky", [A])


def tri_solve_lower(L, B):
    return apply("tri_solve_lower", [L, B])


def tri_inverse(L):
    return apply("tri_solve_lower", [L], identity=True)


def tri_solve_upper(U, B):
    return apply("tri_solve_upper", [U, B])


def diag_extract(x):
    return apply("diag_extract", [x])


def diag_embed(x):
    return apply("diag_embed", [x])


def logdet_from_chol(L):
    return apply("logdet_from_chol", [L])


def expand_dims(x, axis: int):
    t = _as_tensor(x)
    shape = list(t.shape)
    axis = axis % (len(shape) + 1)
    shape.insert(axis, 1)
    return reshape(t, shape)


def logsumexp(x, axis: int = -1):
    """Stable log-sum-exp; the shift is a constant so gradients are exact."""
    t = _as_tensor(x)
    c = np.max(t.value, axis=axis, keepdims=True)
    c = np.where(np.isfinite(c), c, 0.0)
    s = sum(exp(t - broadcast(c, t.shape)), axis=axis)
    return log(s) + np.squeeze(c, axis=axis)


def value(x) -> np.ndarray:
    return x.value if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# finite-difference gradient check


def _evaluate(f, arrays, tape=None):
    if tape is None:
        return f(*[Tensor(a) for a in arrays])
    return f(*[tape.watch(a) for a in arrays])


def check_gradient(f: Callable, x, step: float = 1e-5) -> float:
    """Max relative error between AD and central-difference gradients.

    ``f`` takes one tensor per array in ``x`` (a single array or a list of
    arrays) and returns a scalar tensor.  The error for each entry is
    ``|ad - cd| / (|cd| + 1e-8)``.  Non-finite intermediates raise
    :class:`NonFiniteError` naming the primitive.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    single = isinstance(x, (np.ndarray, float, int))
    # C order so reshape(-1) below is a view the perturbations write through
    arrays = [np.array(a, dtype=np.float64, order="C") for a in ([x] if single else x)]

    tape = Tape(check_finite=True)
    leaves = [tape.watch(a) for a in arrays]
    out = f(*leaves)
    grads = backward(tape, out)
    ad = [grads[t] for t in leaves]

    worst = 0.0
    for k, a in enumerate(arrays):
        flat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(_evaluate(f, arrays).value)
            flat[i] = orig - step
            fm = float(_evaluate(f, arrays).value)
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteError("finite-difference evaluation")
            cd = (fp - fm) / (2.0 * step)
            err = abs(ad[k].reshape(-1)[i] - cd) / (abs(cd) + 1e-8)
            worst = max(worst, err)
    return worst
