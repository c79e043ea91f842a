"""Reverse-mode automatic differentiation over dense float64 arrays, plus Adam.

A :class:`Tape` records every primitive applied to tensors that live on it.
Values are computed eagerly; ``backward`` walks the record in reverse append
order and accumulates adjoints.  A tape is single use: it is discarded after
``backward``.

Broadcasting follows numpy rules for the elementwise binary primitives
(``add``, ``sub``, ``mul``, ``div``); the adjoint of a broadcast operand is
summed back to the operand's shape.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)



class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class TapeConsumedError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, param_id):
        super().__init__(f"non-finite gradient for parameter {param_id!r}")
        self.param_id = param_id


class Group(enum.Enum):
    GENERATIVE = "theta"
    INFERENCE = "phi"
    AUXILIARY = "varphi"


class Parameter:
    """A named trainable array that belongs to exactly one parameter group."""

    __slots__ = ("id", "value", "_group")

    def __init__(self, id, value, group):
        self.id = id
        self.value = np.array(value, dtype=np.float64)
        self._group = Group(group)

    @property
    def group(self):
        return self._group

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Parameter({self.id!r}, shape={self.value.shape}, group={self._group.name})"


class Tensor:
    """A float64 array, optionally attached to a tape node.

    Tensors with ``tape is None`` are constants: they never receive adjoints.
    """

    __slots__ = ("value", "tape", "node")
    __array_priority__ = 100

    def __init__(self, value, tape=None, node=-1):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self):
        return self.value.size

    def item(self):
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else self.value

    def numpy(self):
        return self.value

    def __repr__(self):
        where = "const" if self.tape is None else f"node={self.node}"
        return f"Tensor(shape={self.value.shape}, {where})"

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __truediv__ = lambda a, b: div(a, b)
    __rtruediv__ = lambda a, b: div(b, a)
    __neg__ = lambda a: neg(a)
    __matmul__ = lambda a, b: matmul(a, b)
    __rmatmul__ = lambda a, b: matmul(b, a)
    __getitem__ = lambda a, idx: take(a, idx)


@dataclass
class _Node:
    parents: tuple
    backward: object  # callable(grad) -> tuple of parent grads (None to skip)


class Tape:
    """Append-only record of primitive operations.

    Node ``i`` only references nodes ``< i``, so append order is a valid
    topological order.
    """

    def __init__(self):
        self.nodes = []
        self.params = {}
        self._consumed = False

    def __len__(self):
        return len(self.nodes)

    def watch(self, param):
        """Put a parameter on the tape as a leaf and return its tensor."""
        if param.id in self.params:
            return self.params[param.id][1]
        t = self._leaf(param.value)
        self.params[param.id] = (param, t)
        return t

    def _leaf(self, value):
        self._check_live()
        self.nodes.append(_Node((), None))
        return Tensor(value, self, len(self.nodes) - 1)

    def _check_live(self):
        if self._consumed:
            raise TapeConsumedError("tape already consumed by backward()")

    def record(self, value, inputs, backward):
        self._check_live()
        parents = tuple(x.node if (x is not None and x.tape is self) else -1 for x in inputs)
        self.nodes.append(_Node(parents, backward))
        return Tensor(value, self, len(self.nodes) - 1)

    def adjoints(self, root):
        """Return the adjoint of every node for a scalar root (consumes the tape)."""
        self._check_live()
        if root.tape is not self:
            raise ValueError("root is not recorded on this tape")
        if root.value.size != 1:
            raise ShapeError(f"backward() needs a scalar root, got shape {root.shape}")
        grads = [None] * len(self.nodes)
        grads[root.node] = np.ones_like(root.value)
        for i in range(root.node, -1, -1):
            g = grads[i]
            node = self.nodes[i]
            if g is None or node.backward is None:
                continue
            for p, pg in zip(node.parents, node.backward(g)):
                if p < 0 or pg is None:
                    continue
                grads[p] = pg if grads[p] is None else grads[p] + pg
        self._consumed = True
        self.nodes = []
        return grads

    def backward(self, root):
        """Gradient map ``{param id: array}`` of ``root`` wrt every watched parameter.

        Parameters on the tape that ``root`` does not depend on map to zeros.
        """
        params = self.params
        grads = self.adjoints(root)
        out = {}
        for pid, (param, t) in params.items():
            g = grads[t.node]
            out[pid] = np.zeros_like(param.value) if g is None else np.broadcast_to(g, param.shape).copy()
        return out


def backward(root):
    if root.tape is None:
        raise ValueError("root is a constant; nothing to differentiate")
    return root.tape.backward(root)


# ---------------------------------------------------------------- helpers

def _tape_of(*xs):
    tape = None
    for x in xs:
        if isinstance(x, Tensor) and x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise ValueError("operands recorded on different tapes")
            tape = x.tape
    return tape


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from exc


def _unary(x, value, dfn):
    """Record an elementwise op whose local derivative is ``dfn()``."""
    x = as_tensor(x)
    if x.tape is None:
        return Tensor(value)
    return x.tape.record(value, (x,), lambda g: (g * dfn(),))


def _binary(a, b, value, ga, gb):
    a, b = as_tensor(a), as_tensor(b)
    tape = _tape_of(a, b)
    if tape is None:
        return Tensor(value)
    sa, sb = a.shape, b.shape
    need_a, need_b = a.tape is tape, b.tape is tape

    def bw(g):
        return (
            _unbroadcast(ga(g), sa) if need_a else None,
            _unbroadcast(gb(g), sb) if need_b else None,
        )

    return tape.record(value, (a, b), bw)


# ------------------------------------------------------------- primitives

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _binary(a, b, a.value + b.value, lambda g: g, lambda g: g)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    return _binary(a, b, a.value - b.value, lambda g: g, lambda g: -g)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    av, bv = a.value, b.value
    return _binary(a, b, av * bv, lambda g: g * bv, lambda g: g * av)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b)
    av, bv = a.value, b.value
    if np.any(bv == 0.0):
        raise DomainError("division by zero")
    out = av / bv
    return _binary(a, b, out, lambda g: g / bv, lambda g: -g * out / bv)


def neg(x):
    x = as_tensor(x)
    return _unary(x, -x.value, lambda: -1.0)


def square(x):
    x = as_tensor(x)
    v = x.value
    return _unary(x, v * v, lambda: 2.0 * v)


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.value)
    return _unary(x, out, lambda: out)


def log(x):
    x = as_tensor(x)
    v = x.value
    if np.any(v <= 0.0):
        raise DomainError("log of a non-positive value")
    return _unary(x, np.log(v), lambda: 1.0 / v)


def sigmoid(x):
    x = as_tensor(x)
    s = _sigmoid(x.value)
    return _unary(x, s, lambda: s * (1.0 - s))


def softplus(x):
    x = as_tensor(x)
    v = x.value
    return _unary(x, np.logaddexp(0.0, v), lambda: _sigmoid(v))


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.value)
    return _unary(x, out, lambda: 1.0 - out * out)


def elu(x):
    x = as_tensor(x)
    v = x.value
    em1 = np.expm1(np.minimum(v, 0.0))
    # expm1(v) >= v everywhere, and em1 == 0 for v > 0
    out = np.maximum(v, em1)
    return _unary(x, out, lambda: em1 + 1.0)


ACTIVATIONS = {"elu": elu, "softplus": softplus, "tanh": tanh}


def rectifier(x, kind="elu"):
    """Smooth rectifier: ``elu`` (default) or ``softplus``."""
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


def _sigmoid(v):
    # split by sign so neither branch overflows
    out = np.empty_like(v, dtype=np.float64)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def matmul(a, b):
    """2-d matrix product ``(n, k) @ (k, m)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not conform")
    av, bv = a.value, b.value
    return _binary(a, b, av @ bv, lambda g: g @ bv.T, lambda g: av.T @ g)


def sum(x, axis=None, keepdims=False):  # noqa: A001
    x = as_tensor(x)
    shape = x.shape
    out = x.value.sum(axis=axis, keepdims=keepdims)

    def d(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, shape)

    if x.tape is None:
        return Tensor(out)
    return x.tape.record(out, (x,), lambda g: (d(g),))


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    n = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / float(n))


def broadcast_to(x, shape):
    x = as_tensor(x)
    try:
        out = np.broadcast_to(x.value, shape)
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}") from exc
    src = x.shape
    if x.tape is None:
        return Tensor(out)
    return x.tape.record(out, (x,), lambda g: (_unbroadcast(g, src),))


def reshape(x, shape):
    x = as_tensor(x)
    src = x.shape
    out = x.value.reshape(shape)
    if x.tape is None:
        return Tensor(out)
    return x.tape.record(out, (x,), lambda g: (g.reshape(src),))


def concat(xs, axis=-1):
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.value for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from exc
    tape = _tape_of(*xs)
    if tape is None:
        return Tensor(out)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        parts = np.split(g, bounds, axis=axis)
        return tuple(p if x.tape is tape else None for p, x in zip(parts, xs))

    return tape.record(out, xs, bw)


def take(x, index):
    """Basic or advanced indexing (``x[index]``); the adjoint scatters back."""
    x = as_tensor(x)
    out = x.value[index]
    shape = x.shape
    if x.tape is None:
        return Tensor(out)

    basic = isinstance(index, slice) or (
        isinstance(index, tuple) and all(isinstance(i, (slice, int)) for i in index)
    )

    def bw(g):
        full = np.zeros(shape)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return x.tape.record(out, (x,), bw)


def slice_cols(x, start, stop):
    return take(x, (slice(None), slice(start, stop)))


def stop_gradient(x):
    return Tensor(as_tensor(x).value)


# ------------------------------------------------------------------ Adam

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def update(self, params, grads):
        """One bias-corrected Adam step, in place on ``params`` (a dict of Parameter).

        Gradients are of the loss being minimised.  Any non-finite gradient
        aborts the whole step before a single parameter is touched.
        """
        for pid, g in grads.items():
            if not np.all(np.isfinite(g)):
                logger.error("aborting Adam step %d: non-finite gradient in %s", self.step + 1, pid)
                raise NonFiniteGradientError(pid)
        self.step += 1
        bc1 = 1.0 - self.beta1 ** self.step
        bc2 = 1.0 - self.beta2 ** self.step
        for pid, param in params.items():
            g = grads.get(pid)
            if g is None:
                g = np.zeros_like(param.value)
            if pid not in self.m:
                self.m[pid] = np.zeros_like(param.value)
                self.v[pid] = np.zeros_like(param.value)
            m, v = self.m[pid], self.v[pid]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            if self.lr != 0.0:
                param.value -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps_adam)
