"""Define-by-run reverse-mode differentiation over float64 numpy arrays.

A :class:`Tape` records every operation performed on :class:`Node` values
while it is active. ``tape.backward(loss)`` walks the record in reverse and
returns the gradient of a scalar loss with respect to every parameter leaf.

    with Tape() as tape:
        w = tape.param("w", np.ones((3, 2)))
        loss = ad.sum(ad.tanh(w @ x))
    grads = tape.backward(loss)

Tapes are single use: build a fresh one for each forward pass.
"""
from __future__ import annotations

import itertools
import threading
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla
from scipy.linalg import blas, lapack

__all__ = [
    "AutodiffError",
    "ShapeError",
    "CholeskyError",
    "Node",
    "Tape",
    "active_tape",
    "record",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sqrt",
    "tanh",
    "square",
    "matmul",
    "transpose",
    "reshape",
    "sum",
    "mean",
    "cholesky",
    "solve_triangular",
    "concat",
    "getitem",
    "diagonal",
    "grad_check",
]


class AutodiffError(RuntimeError):
    pass


class ShapeError(AutodiffError, ValueError):
    """Operand shapes an op cannot combine."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes " + " and ".join(str(s) for s in shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class CholeskyError(AutodiffError, np.linalg.LinAlgError):
    """Raised when a matrix is not numerically positive definite.

    ``pivot`` is the zero-based index of the column where factorization broke down.
    """

    def __init__(self, pivot: int, size: int):
        self.pivot = pivot
        self.size = size
        super().__init__(f"cholesky: matrix of size {size} not positive definite at pivot {pivot}")


_ids = itertools.count()
_local = threading.local()


def active_tape() -> "Tape":
    stack = getattr(_local, "stack", None)
    if not stack:
        raise AutodiffError("no active Tape; wrap the computation in `with Tape():`")
    return stack[-1]


class Node:
    """A value on a tape. Leaves are parameters or constants."""

    __slots__ = ("id", "op", "parents", "value", "vjp", "requires_grad", "name")
    __array_priority__ = 100.0

    def __init__(self, value, op="const", parents=(), vjp=None, requires_grad=False, name=None):
        self.id = next(_ids)
        self.op = op
        self.parents = parents
        self.value = value
        self.vjp = vjp
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.shape})"

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

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)


class Tape:
    """Ordered record of operations plus the named parameter leaves."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, Node] = {}
        self._ids: set[int] = set()
        self.consumed = False
        self.nbytes = 0
        self.peak_nbytes = 0

    def __enter__(self):
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def param(self, name: str, value) -> Node:
        if name in self.params:
            raise AutodiffError(f"duplicate parameter name {name!r}")
        node = Node(np.array(value, dtype=np.float64), op="param", requires_grad=True, name=name)
        self.params[name] = node
        self._append(node)
        return node

    def _append(self, node: Node) -> None:
        self.nodes.append(node)
        self._ids.add(node.id)
        self.nbytes += node.value.nbytes
        self.peak_nbytes = max(self.peak_nbytes, self.nbytes)

    def account(self, nbytes: int) -> None:
        """Add bytes held by an op's saved residuals to the working-set estimate."""
        self.nbytes += int(nbytes)
        self.peak_nbytes = max(self.peak_nbytes, self.nbytes)

    def __contains__(self, node: Node) -> bool:
        return node.id in self._ids

    def backward(self, loss: Node) -> dict[str, np.ndarray]:
        if self.consumed:
            raise AutodiffError("tape already consumed by a previous backward pass")
        if not isinstance(loss, Node) or loss not in self:
            raise AutodiffError("loss node is not recorded on this tape")
        if loss.value.size != 1:
            raise AutodiffError(f"backward needs a scalar loss, got shape {loss.shape}")
        self.consumed = True

        adjoints: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
        for node in reversed(self.nodes):
            g = adjoints.pop(node.id, None) if node.op != "param" else adjoints.get(node.id)
            if g is None or node.vjp is None:
                continue
            parent_grads = node.vjp(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(f"{node.op} backward", pg.shape, parent.shape)
                if parent.id in adjoints:
                    adjoints[parent.id] = adjoints[parent.id] + pg
                else:
                    adjoints[parent.id] = pg
            node.vjp = None  # release residuals
        return {
            name: adjoints.get(p.id, np.zeros_like(p.value)) for name, p in self.params.items()
        }


def _as_node(x) -> Node:
    if isinstance(x, Node):
        return x
    return Node(np.asarray(x, dtype=np.float64))


def record(op: str, value: np.ndarray, parents: Sequence[Node], vjp: Callable | None) -> Node:
    """Append an op result to the active tape.

    ``vjp(g)`` maps the output adjoint to one adjoint per parent (``None`` to skip).
    It is dropped when no parent needs a gradient.
    """
    tape = active_tape()
    value = np.asarray(value, dtype=np.float64)
    needs = any(p.requires_grad for p in parents)
    node = Node(value, op=op, parents=tuple(parents), vjp=vjp if needs else None, requires_grad=needs)
    tape._append(node)
    return node


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _bshape(op: str, a: Node, b: Node) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# elementwise binary ----------------------------------------------------------

def add(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _bshape("add", a, b)
    return record("add", a.value + b.value, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _bshape("sub", a, b)
    return record("sub", a.value - b.value, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _bshape("mul", a, b)
    av, bv = a.value, b.value
    return record("mul", av * bv, (a, b),
                  lambda g: (_unbroadcast(g * bv, a.shape) if a.requires_grad else None,
                             _unbroadcast(g * av, b.shape) if b.requires_grad else None))


def div(a, b) -> Node:
    a, b = _as_node(a), _as_node(b)
    _bshape("div", a, b)
    av, bv = a.value, b.value
    out = av / bv
    return record("div", out, (a, b),
                  lambda g: (_unbroadcast(g / bv, a.shape) if a.requires_grad else None,
                             _unbroadcast(-g * out / bv, b.shape) if b.requires_grad else None))


# elementwise unary -----------------------------------------------------------

def neg(a) -> Node:
    a = _as_node(a)
    return record("neg", -a.value, (a,), lambda g: (-g,))


def exp(a) -> Node:
    a = _as_node(a)
    out = np.exp(a.value)
    return record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Node:
    a = _as_node(a)
    av = a.value
    return record("log", np.log(av), (a,), lambda g: (g / av,))


def sqrt(a) -> Node:
    a = _as_node(a)
    out = np.sqrt(a.value)
    return record("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a) -> Node:
    a = _as_node(a)
    out = np.tanh(a.value)
    return record("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def square(a) -> Node:
    a = _as_node(a)
    av = a.value
    return record("square", av * av, (a,), lambda g: (2.0 * g * av,))


# linear algebra --------------------------------------------------------------

def matmul(a, b) -> Node:
    """Matrix-matrix, matrix-vector or vector-matrix product."""
    a, b = _as_node(a), _as_node(b)
    av, bv = a.value, b.value
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2) or av.shape[-1] != bv.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            if bv.ndim == 2:
                ga = g @ bv.T
            else:
                ga = np.outer(g, bv) if av.ndim == 2 else g * bv
        if b.requires_grad:
            if av.ndim == 2:
                gb = av.T @ g
            else:
                gb = np.outer(av, g) if bv.ndim == 2 else g * av
        return ga, gb

    return record("matmul", av @ bv, (a, b), vjp)


def transpose(a) -> Node:
    a = _as_node(a)
    if a.ndim != 2:
        raise ShapeError("transpose", a.shape, detail="needs a 2-d array")
    return record("transpose", a.value.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Node:
    a = _as_node(a)
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(np.atleast_1d(shape))) from None
    return record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def sum(a, axis: int | None = None, keepdims: bool = False) -> Node:  # noqa: A001
    a = _as_node(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record("sum", out, (a,), vjp)


def mean(a, axis: int | None = None, keepdims: bool = False) -> Node:
    a = _as_node(a)
    count = a.value.size if axis is None else a.shape[axis]
    return div(sum(a, axis=axis, keepdims=keepdims), float(count))


def _tril_halfdiag(x: np.ndarray) -> np.ndarray:
    out = np.tril(x)
    out[np.diag_indices_from(out)] *= 0.5
    return out


def _chol(value: np.ndarray) -> np.ndarray:
    c, info = lapack.dpotrf(value, lower=1, clean=1)
    if info > 0:
        raise CholeskyError(pivot=int(info) - 1, size=value.shape[0])
    if info < 0:
        raise AutodiffError(f"dpotrf: illegal argument {-info}")
    return c


def cholesky(a) -> Node:
    """Lower Cholesky factor of a symmetric positive-definite matrix.

    Backward uses the symmetric matrix-form adjoint
    ``Abar = sym(L^-T Phi(L^T Lbar) L^-1)``, Phi = lower triangle with halved diagonal.
    """
    a = _as_node(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError("cholesky", a.shape, detail="needs a square matrix")
    L = _chol(a.value)

    def vjp(g):
        P = _tril_halfdiag(L.T @ np.tril(g))
        Linv = sla.solve_triangular(L, np.eye(L.shape[0]), lower=True, check_finite=False)
        PL = blas.dtrmm(1.0, Linv, P, side=1, lower=1)  # P @ Linv
        S = blas.dtrmm(1.0, Linv, PL, lower=1, trans_a=1)  # Linv^T @ P @ Linv
        return (0.5 * (S + S.T),)

    return record("cholesky", L, (a,), vjp)


def solve_triangular(L, B, lower: bool = True, trans: bool = False) -> Node:
    """Solve ``L X = B`` (or ``L^T X = B`` when ``trans``) for triangular ``L``."""
    L, B = _as_node(L), _as_node(B)
    if L.ndim != 2 or L.shape[0] != L.shape[1] or B.shape[0] != L.shape[0] or B.ndim > 2:
        raise ShapeError("solve_triangular", L.shape, B.shape)
    Lv = L.value
    X = sla.solve_triangular(Lv, B.value, lower=lower, trans="T" if trans else "N", check_finite=False)
    mask = np.tril if lower else np.triu

    def vjp(g):
        gB = sla.solve_triangular(Lv, g, lower=lower, trans="N" if trans else "T", check_finite=False)
        gL = None
        if L.requires_grad:
            if trans:
                gL = -(np.outer(X, gB) if X.ndim == 1 else X @ gB.T)
            else:
                gL = -(np.outer(gB, X) if X.ndim == 1 else gB @ X.T)
            gL = mask(gL)
        return gL, gB

    return record("solve_triangular", X, (L, B), vjp)


# structural ------------------------------------------------------------------

def concat(items: Sequence, axis: int = 0) -> Node:
    nodes = [_as_node(x) for x in items]
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError:
        raise ShapeError("concat", *(n.shape for n in nodes)) from None
    bounds = np.cumsum([0] + [n.shape[axis] for n in nodes])

    def vjp(g):
        return tuple(
            np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:])
        )

    return record("concat", out, nodes, vjp)


def getitem(a, index) -> Node:
    a = _as_node(a)
    try:
        out = a.value[index]
    except IndexError as err:
        raise ShapeError("getitem", a.shape, detail=str(err)) from None

    def vjp(g):
        full = np.zeros_like(a.value)
        np.add.at(full, index, g)
        return (full,)

    return record("getitem", np.array(out, dtype=np.float64), (a,), vjp)


def diagonal(a) -> Node:
    a = _as_node(a)
    if a.ndim != 2:
        raise ShapeError("diagonal", a.shape, detail="needs a 2-d array")
    k = min(a.shape)
    idx = np.arange(k)
    return getitem(a, (idx, idx))


# checking --------------------------------------------------------------------

def grad_check(fn: Callable[[dict[str, Node]], Node], params: dict[str, np.ndarray],
               step: float = 1e-6) -> float:
    """Largest |autodiff - central difference| / max(1, |central difference|).

    ``fn`` receives a dict of parameter nodes and returns a scalar node. It must be
    deterministic (freeze any noise draws outside ``fn``).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    with Tape() as tape:
        nodes = {k: tape.param(k, v) for k, v in params.items()}
        loss = fn(nodes)
    if not np.all(np.isfinite(loss.value)):
        raise AutodiffError("function value is not finite")
    grads = tape.backward(loss)

    def value_at(values):
        with Tape():
            out = fn({k: Node(v) for k, v in values.items()}).value
        if not np.all(np.isfinite(out)):
            raise AutodiffError("function value is not finite during finite differencing")
        return float(np.asarray(out).reshape(()))

    worst = 0.0
    for name, base in params.items():
        flat = base.reshape(-1)
        for i in range(flat.size):
            shifted = dict(params)
            up = flat.copy()
            up[i] += step
            shifted[name] = up.reshape(base.shape)
            f_up = value_at(shifted)
            down = flat.copy()
            down[i] -= step
            shifted[name] = down.reshape(base.shape)
            f_down = value_at(shifted)
            fd = (f_up - f_down) / (2.0 * step)
            ad = grads[name].reshape(-1)[i]
            worst = max(worst, abs(ad - fd) / max(1.0, abs(fd)))
    return worst
