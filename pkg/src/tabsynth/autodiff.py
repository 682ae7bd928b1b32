"""Small reverse-mode automatic differentiation engine over numpy arrays.

Every operation on :class:`Tensor` values that require gradients records a
node holding its parents and a vector-Jacobian product. The VJPs are
themselves written with Tensor operations, so a reverse sweep run with
``create_graph=True`` is recorded as well and can be differentiated again.
That second sweep is what the gradient penalty needs.

Only the operations the generator and critic use are provided: affine
maps, elementwise arithmetic with broadcasting, relu/leaky-relu, tanh,
exp/log, softmax, row norms, reshaping, slicing and concatenation.
Piecewise-linear activations have zero second derivative.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from .errors import ValidationError

_state = threading.local()


def is_recording() -> bool:
    return getattr(_state, "recording", True)


@contextmanager
def recording(enabled: bool):
    prev = is_recording()
    _state.recording = enabled
    try:
        yield
    finally:
        _state.recording = prev


def no_grad():
    return recording(False)


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "vjp", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents = ()
        self.vjp = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def T(self):
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, vjp) -> Tensor:
    out = Tensor(data)
    if is_recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.vjp = vjp
    return out


# -- shape plumbing ---------------------------------------------------------


def sum_to(x: Tensor, shape) -> Tensor:
    """Reduce a broadcast result back to ``shape`` (the adjoint of broadcasting)."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1)
    data = x.data.sum(axis=axes, keepdims=True)
    if lead:
        data = data.reshape(data.shape[lead:])
    src = x.shape
    return _node(data, (x,), lambda g: (broadcast_to(g, src),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src = x.shape
    return _node(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (sum_to(g, src),))


def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g: (reshape(g, src),))


def transpose(x: Tensor) -> Tensor:
    return _node(x.data.T, (x,), lambda g: (transpose(g),))


def getitem(x: Tensor, index) -> Tensor:
    src = x.shape
    return _node(x.data[index], (x,), lambda g: (scatter(g, index, src),))


def scatter(x: Tensor, index, shape) -> Tensor:
    """Zeros of ``shape`` with ``x`` written at ``index`` (the adjoint of indexing)."""
    data = np.zeros(shape)
    np.add.at(data, index, x.data) if _is_fancy(index) else data.__setitem__(index, x.data)
    return _node(data, (x,), lambda g: (getitem(g, index),))


def _is_fancy(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(xs, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    data = np.concatenate([x.data for x in xs], axis=axis)
    ax = axis % data.ndim
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def vjp(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(int(lo), int(hi))
            out.append(getitem(g, tuple(idx)))
        return tuple(out)

    return _node(data, tuple(xs), vjp)


# -- arithmetic -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data + b.data, (a, b), lambda g: (sum_to(g, a.shape), sum_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data - b.data, (a, b), lambda g: (sum_to(g, a.shape), sum_to(neg(g), b.shape)))


def neg(a) -> Tensor:
    return _node(-a.data, (a,), lambda g: (neg(g),))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(a.data * b.data, (a, b), lambda g: (sum_to(g * b, a.shape), sum_to(g * a, b.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g):
        ga = g / b
        return sum_to(ga, a.shape), sum_to(neg(ga * a / b), b.shape)

    return _node(a.data / b.data, (a, b), vjp)


def power(a: Tensor, exponent: float) -> Tensor:
    if exponent == 2:
        return mul(a, a)
    return _node(a.data**exponent, (a,), lambda g: (g * exponent * power(a, exponent - 1),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValidationError("matmul expects two matrices")
    if a.shape[1] != b.shape[0]:
        raise ValidationError(f"shape mismatch in matmul: {a.shape} @ {b.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)))


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = x.data.sum(axis=axis, keepdims=keepdims)
    src = x.shape
    kept = x.data.sum(axis=axis, keepdims=True).shape

    def vjp(g):
        return (broadcast_to(reshape(g, kept), src),)

    return _node(data, (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return sum_(x, axis, keepdims) * (1.0 / count)


# -- elementwise nonlinearities ---------------------------------------------


def exp(x: Tensor) -> Tensor:
    out = _node(np.exp(x.data), (x,), lambda g: (g * out,))
    return out


def log(x: Tensor) -> Tensor:
    return _node(np.log(x.data), (x,), lambda g: (g / x,))


def tanh(x: Tensor) -> Tensor:
    def vjp(g):
        return (g * (1.0 - out * out),)

    out = _node(np.tanh(x.data), (x,), vjp)
    return out


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def leaky_relu(x: Tensor, slope: float) -> Tensor:
    factor = np.where(x.data > 0, 1.0, slope)
    return _node(x.data * factor, (x,), lambda g: (g * factor,))


def safe_reciprocal(x: Tensor) -> Tensor:
    """``1/x`` with 0 where ``x == 0``; the zero branch has zero derivative."""
    zero = x.data == 0
    with np.errstate(divide="ignore"):
        data = np.where(zero, 0.0, 1.0 / np.where(zero, 1.0, x.data))

    def vjp(g):
        return (neg(g * out * out),)

    out = _node(data, (x,), vjp)
    return out


def sqrt(x: Tensor) -> Tensor:
    def vjp(g):
        return (g * 0.5 * safe_reciprocal(out),)

    out = _node(np.sqrt(x.data), (x,), vjp)
    return out


def row_norm(x: Tensor) -> Tensor:
    """Euclidean norm of each row, shape (n,). The gradient at a zero row is 0."""
    norm = np.sqrt((x.data * x.data).sum(axis=1))

    def vjp(g):
        scale = reshape(g * safe_reciprocal(out), (-1, 1))
        return (x * scale,)

    out = _node(norm, (x,), vjp)
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)

    def vjp(g):
        return (out * (g - sum_(g * out, axis=axis, keepdims=True)),)

    out = _node(e / e.sum(axis=axis, keepdims=True), (x,), vjp)
    return out


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    data = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def vjp(g):
        return (g - exp(out) * sum_(g, axis=axis, keepdims=True),)

    out = _node(data, (x,), vjp)
    return out


# -- differentiation --------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Tensor, inputs, grad_output=None, create_graph: bool = False) -> list[Tensor]:
    """Gradients of ``output`` with respect to each of ``inputs``.

    ``output`` must be a scalar unless ``grad_output`` is given. With
    ``create_graph`` the reverse sweep is recorded, so the returned
    gradients can themselves be differentiated. Inputs that ``output``
    does not depend on get a zero gradient.
    """
    if grad_output is None:
        if output.size != 1:
            raise ValidationError(f"gradient root must be scalar, got shape {output.shape}")
        grad_output = Tensor(np.ones(output.shape))
    inputs = list(inputs)
    grads: dict[int, Tensor] = {}
    if output.requires_grad:
        with recording(create_graph):
            grads[id(output)] = as_tensor(grad_output)
            for node in reversed(_topological(output)):
                g = grads.pop(id(node), None) if node.vjp is not None else grads.get(id(node))
                if g is None or node.vjp is None:
                    continue
                for parent, pg in zip(node.parents, node.vjp(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    grads[key] = pg if key not in grads else grads[key] + pg
                if any(node is x for x in inputs):
                    grads[id(node)] = g
    return [grads.get(id(x), Tensor(np.zeros(x.shape))) for x in inputs]
