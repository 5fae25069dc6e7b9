"""Minimal reverse-mode automatic differentiation over numpy arrays.

A :class:`Tape` records primitive operations applied to :class:`Var` objects.
Every primitive also accepts plain arrays; when no operand is a ``Var`` the
primitive just returns the numpy result, so numerical code can be written once
and run either on arrays (fast path) or on tape variables (training path).

Example::

    tape = Tape()
    w = tape.var(np.ones(3))
    loss = ad.sumsq(ad.matmul(x, w))
    (gw,) = tape.gradient(loss, [w])
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform to a primitive."""


class ConfigurationError(ValueError):
    """Invalid constructor or call argument."""


@dataclass(frozen=True)
class Primitive:
    forward: Callable
    vjp: Callable


PRIMITIVES: dict[str, Primitive] = {}


def _primitive(name):
    def register(cls_fns):
        fwd, vjp = cls_fns()
        PRIMITIVES[name] = Primitive(fwd, vjp)
        return cls_fns
    return register


class Var:
    """A value recorded on a tape.

    ``index`` is the position of the node on its tape; leaves are nodes whose
    ``kind`` is ``"leaf"``.
    """

    __slots__ = ("value", "tape", "index", "kind", "parents", "attrs")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, value, tape, kind="leaf", parents=(), attrs=None):
        self.value = value
        self.tape = tape
        self.kind = kind
        self.parents = parents
        self.attrs = attrs or {}
        self.index = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return np.shape(self.value)

    @property
    def ndim(self):
        return np.ndim(self.value)

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Var(kind={self.kind}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        if np.isscalar(other):
            return scale(self, other)
        return mul(other, self)

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise ShapeError("division is only supported by scalars")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)


class Tape:
    """Ordered record of primitive applications.

    A tape is single-use: build it for one loss evaluation, call
    :meth:`gradient`, then drop it.
    """

    def __init__(self):
        self.nodes: list[Var] = []

    def var(self, value) -> Var:
        """Register a differentiable leaf."""
        return Var(np.array(value, dtype=float), self)

    def vars(self, values) -> list[Var]:
        return [self.var(v) for v in values]

    def replay(self):
        """Recompute every node's forward value from its operands."""
        out = []
        for node in self.nodes:
            if node.kind == "leaf":
                out.append(node.value)
                continue
            vals = [p.value if isinstance(p, Var) else p for p in node.parents]
            out.append(PRIMITIVES[node.kind].forward(*vals, **node.attrs))
        return out

    def backward(self, output: Var) -> dict[Var, np.ndarray]:
        """Adjoints of ``output`` with respect to every leaf on the tape."""
        leaves = [n for n in self.nodes if n.kind == "leaf"]
        return dict(zip(leaves, self.gradient(output, leaves)))

    def gradient(self, output: Var, wrt: Sequence[Var]) -> list[np.ndarray]:
        if not isinstance(output, Var):
            # loss did not depend on any tape variable
            return [np.zeros_like(w.value) for w in wrt]
        if output.tape is not self:
            raise ShapeError("output was recorded on a different tape")
        if np.size(output.value) != 1:
            raise ShapeError(f"backward needs a scalar output, got shape {output.shape}")
        grads: list = [None] * (output.index + 1)
        grads[output.index] = np.ones_like(output.value)
        nodes = self.nodes
        for i in range(output.index, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = nodes[i]
            if node.kind == "leaf":
                continue
            parents = node.parents
            vals = [p.value if isinstance(p, Var) else p for p in parents]
            pgrads = PRIMITIVES[node.kind].vjp(g, node.value, *vals, **node.attrs)
            for p, pg in zip(parents, pgrads):
                if pg is None or not isinstance(p, Var):
                    continue
                j = p.index
                if grads[j] is None:
                    grads[j] = pg
                else:
                    grads[j] = grads[j] + pg
        out = []
        for w in wrt:
            g = grads[w.index] if w.index <= output.index else None
            out.append(np.zeros_like(w.value) if g is None else np.asarray(g, dtype=float).reshape(w.shape))
        return out


def value(x):
    """Forward value of a Var or array."""
    return x.value if isinstance(x, Var) else x


def is_var(x) -> bool:
    return isinstance(x, Var)


def record(kind: str, operands: Sequence, **attrs):
    """Apply primitive ``kind``; append a node when any operand is a Var."""
    prim = PRIMITIVES[kind]
    tape = None
    vals = []
    for op in operands:
        if isinstance(op, Var):
            tape = op.tape if tape is None else tape
            vals.append(op.value)
        else:
            vals.append(op)
    out = prim.forward(*vals, **attrs)
    if tape is None:
        return out
    return Var(out, tape, kind, tuple(operands), attrs)


def _unbroadcast(g, shape):
    if np.shape(g) == shape:
        return g
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _check_broadcast(name, a, b):
    try:
        return np.broadcast_shapes(np.shape(a), np.shape(b))
    except ValueError:
        raise ShapeError(f"{name}: shapes {np.shape(a)} and {np.shape(b)} do not conform") from None


# --- elementwise arithmetic -------------------------------------------------

@_primitive("add")
def _add():
    def fwd(a, b):
        try:
            return a + b
        except ValueError:
            _check_broadcast("add", a, b)
            raise

    def vjp(g, out, a, b):
        return _unbroadcast(g, np.shape(a)), _unbroadcast(g, np.shape(b))
    return fwd, vjp


@_primitive("sub")
def _sub():
    def fwd(a, b):
        try:
            return a - b
        except ValueError:
            _check_broadcast("sub", a, b)
            raise

    def vjp(g, out, a, b):
        return _unbroadcast(g, np.shape(a)), _unbroadcast(-g, np.shape(b))
    return fwd, vjp


@_primitive("mul")
def _mul():
    def fwd(a, b):
        try:
            return a * b
        except ValueError:
            _check_broadcast("mul", a, b)
            raise

    def vjp(g, out, a, b):
        return _unbroadcast(g * b, np.shape(a)), _unbroadcast(g * a, np.shape(b))
    return fwd, vjp


@_primitive("scale")
def _scale():
    def fwd(a, c):
        return a * c

    def vjp(g, out, a, c):
        return g * c, None
    return fwd, vjp


@_primitive("lincomb")
def _lincomb():
    # weighted sum of equally shaped operands; coefficients are constants
    def fwd(*xs, coeffs):
        out = coeffs[0] * xs[0]
        for c, x in zip(coeffs[1:], xs[1:]):
            out = out + c * x
        return out

    def vjp(g, out, *xs, coeffs):
        return tuple(_unbroadcast(c * g, np.shape(x)) for c, x in zip(coeffs, xs))
    return fwd, vjp


# --- linear algebra ---------------------------------------------------------

@_primitive("matmul")
def _matmul():
    def fwd(a, b):
        if (np.ndim(a) not in (1, 2) or np.ndim(b) not in (1, 2)
                or np.shape(a)[-1] != np.shape(b)[0]):
            raise ShapeError(f"matmul: shapes {np.shape(a)} and {np.shape(b)} do not conform")
        return a @ b

    def vjp(g, out, a, b):
        a2 = a if a.ndim == 2 else a[None, :]
        g2 = g if a.ndim == 2 else g[None, ...]
        if b.ndim == 1:
            ga = np.multiply.outer(g, b) if a.ndim == 2 else g * b
            gb = a2.T @ np.reshape(g2, (-1,))
            return ga, gb
        ga = g @ b.T
        gb = a2.T @ g2
        return ga, gb
    return fwd, vjp


@_primitive("matvec")
def _matvec():
    def fwd(A, v):
        if np.ndim(A) != 2 or np.ndim(v) != 1 or np.shape(A)[1] != np.shape(v)[0]:
            raise ShapeError(f"matvec: shapes {np.shape(A)} and {np.shape(v)} do not conform")
        return A @ v

    def vjp(g, out, A, v):
        return np.outer(g, v), A.T @ g
    return fwd, vjp


@_primitive("dot")
def _dot():
    def fwd(a, b):
        if np.shape(a) != np.shape(b) or np.ndim(a) != 1:
            raise ShapeError(f"dot: shapes {np.shape(a)} and {np.shape(b)} do not conform")
        return np.dot(a, b)

    def vjp(g, out, a, b):
        return g * b, g * a
    return fwd, vjp


@_primitive("sum")
def _sum():
    def fwd(a, axis=None):
        return np.sum(a, axis=axis)

    def vjp(g, out, a, axis=None):
        if axis is None:
            return (np.broadcast_to(g, np.shape(a)).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), np.shape(a)).copy(),)
    return fwd, vjp


@_primitive("sumsq")
def _sumsq():
    def fwd(a, axis=None):
        return np.sum(a * a, axis=axis)

    def vjp(g, out, a, axis=None):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (2.0 * g * a,)
    return fwd, vjp


# --- elementwise nonlinearities ---------------------------------------------

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@_primitive("exp")
def _exp():
    return np.exp, lambda g, out, a: (g * out,)


@_primitive("log")
def _log():
    return np.log, lambda g, out, a: (g / a,)


@_primitive("sin")
def _sin():
    return np.sin, lambda g, out, a: (g * np.cos(a),)


@_primitive("cos")
def _cos():
    return np.cos, lambda g, out, a: (-g * np.sin(a),)


@_primitive("sigmoid")
def _sigmoid_prim():
    return _sigmoid, lambda g, out, a: (g * out * (1.0 - out),)


@_primitive("swish")
def _swish():
    def fwd(a):
        return a * _sigmoid(a)

    def vjp(g, out, a):
        s = _sigmoid(a)
        return (g * (s + a * s * (1.0 - s)),)
    return fwd, vjp


@_primitive("relu")
def _relu():
    return (lambda a: np.maximum(a, 0.0)), (lambda g, out, a: (g * (a > 0),))


def smooth_relu_value(x, d):
    x = np.asarray(x, dtype=float)
    xc = np.clip(x, 0.0, d)
    blend = xc**3 / d**2 - xc**4 / (2.0 * d**3)
    return np.where(x <= 0.0, 0.0, np.where(x > d, x - 0.5 * d, blend))


def smooth_relu_slope(x, d):
    x = np.asarray(x, dtype=float)
    xc = np.clip(x, 0.0, d)
    blend = 3.0 * xc**2 / d**2 - 2.0 * xc**3 / d**3
    return np.where(x <= 0.0, 0.0, np.where(x > d, 1.0, blend))


def smooth_relu_curvature(x, d):
    x = np.asarray(x, dtype=float)
    xc = np.clip(x, 0.0, d)
    blend = 6.0 * xc / d**2 - 6.0 * xc**2 / d**3
    return np.where((x <= 0.0) | (x > d), 0.0, blend)


@_primitive("smooth_relu")
def _smooth_relu():
    def fwd(a, d):
        return smooth_relu_value(a, d)

    def vjp(g, out, a, d):
        return (g * smooth_relu_slope(a, d),)
    return fwd, vjp


@_primitive("smooth_relu_slope")
def _smooth_relu_slope():
    def fwd(a, d):
        return smooth_relu_slope(a, d)

    def vjp(g, out, a, d):
        return (g * smooth_relu_curvature(a, d),)
    return fwd, vjp


@_primitive("max_list")
def _max_list():
    def fwd(*xs):
        shapes = {np.shape(x) for x in xs}
        if len(shapes) != 1:
            raise ShapeError(f"max_list: operand shapes differ {sorted(shapes)}")
        return np.max(np.stack(xs), axis=0)

    def vjp(g, out, *xs):
        # first maximal operand takes the whole adjoint
        winner = np.argmax(np.stack(xs), axis=0)
        return tuple(g * (winner == k) for k in range(len(xs)))
    return fwd, vjp


@_primitive("stop_gradient")
def _stop_gradient():
    return (lambda a: a), (lambda g, out, a: (None,))


# --- structural -------------------------------------------------------------

@_primitive("concat")
def _concat():
    def fwd(*xs, axis=-1):
        try:
            return np.concatenate(xs, axis=axis)
        except ValueError as exc:
            raise ShapeError(f"concat: {exc}") from None

    def vjp(g, out, *xs, axis=-1):
        sizes = np.cumsum([np.shape(x)[axis] for x in xs])[:-1]
        return tuple(np.split(g, sizes, axis=axis))
    return fwd, vjp


@_primitive("stack")
def _stack():
    def fwd(*xs, axis=0):
        try:
            return np.stack(xs, axis=axis)
        except ValueError as exc:
            raise ShapeError(f"stack: {exc}") from None

    def vjp(g, out, *xs, axis=0):
        return tuple(np.moveaxis(g, axis, 0))
    return fwd, vjp


@_primitive("getitem")
def _getitem():
    def fwd(a, idx):
        return a[idx]

    def vjp(g, out, a, idx):
        ga = np.zeros(np.shape(a))
        np.add.at(ga, idx, g)
        return ga, None
    return fwd, vjp


@_primitive("reshape")
def _reshape():
    def fwd(a, shape):
        return np.reshape(a, shape)

    def vjp(g, out, a, shape):
        return np.reshape(g, np.shape(a)), None
    return fwd, vjp


# --- public functional API --------------------------------------------------

def add(a, b):
    return record("add", (a, b))


def sub(a, b):
    return record("sub", (a, b))


def mul(a, b):
    return record("mul", (a, b))


def scale(a, c: float):
    return record("scale", (a, float(c)))


def lincomb(coeffs: Sequence[float], xs: Sequence):
    if len(coeffs) != len(xs) or not xs:
        raise ShapeError("lincomb: need one coefficient per operand")
    return record("lincomb", tuple(xs), coeffs=tuple(float(c) for c in coeffs))


def matmul(a, b):
    return record("matmul", (a, b))


def matvec(A, v):
    return record("matvec", (A, v))


def dot(a, b):
    return record("dot", (a, b))


def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    return record("sum", (a,), axis=axis)


def sumsq(a, axis=None):
    """Squared L2 norm (over ``axis`` or everything)."""
    return record("sumsq", (a,), axis=axis)


def exp(a):
    return record("exp", (a,))


def log(a):
    return record("log", (a,))


def sin(a):
    return record("sin", (a,))


def cos(a):
    return record("cos", (a,))


def sigmoid(a):
    return record("sigmoid", (a,))


def swish(a):
    return record("swish", (a,))


def relu(a):
    return record("relu", (a,))


def smooth_relu(a, d: float):
    if not d > 0:
        raise ConfigurationError(f"smoothing width must be positive, got {d}")
    return record("smooth_relu", (a,), d=float(d))


def smooth_relu_grad(a, d: float):
    """Derivative of :func:`smooth_relu` as a differentiable primitive."""
    if not d > 0:
        raise ConfigurationError(f"smoothing width must be positive, got {d}")
    return record("smooth_relu_slope", (a,), d=float(d))


def max_list(xs: Sequence):
    return record("max_list", tuple(xs))


def stop_gradient(a):
    return record("stop_gradient", (a,))


def concat(xs: Sequence, axis: int = -1):
    return record("concat", tuple(xs), axis=axis)


def stack(xs: Sequence, axis: int = 0):
    return record("stack", tuple(xs), axis=axis)


def getitem(a, idx):
    return record("getitem", (a, idx))


def reshape(a, shape):
    return record("reshape", (a, tuple(shape)))
