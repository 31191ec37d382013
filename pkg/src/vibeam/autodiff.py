"""Reverse-mode automatic differentiation over dense float64 arrays.

Every value is a :class:`Tensor`.  Operations record their operands and a
local vector-Jacobian product; :func:`backward` walks the recorded nodes in
reverse creation order.  Shapes must agree exactly: the only implicit
broadcast is between a tensor and a scalar (a Python number or a 0-d
tensor).  Use :func:`expand` to repeat a tensor along a new axis.

Complex values are carried as real tensors with a leading axis of length 2
(real part, imaginary part); :func:`cmatmul` multiplies two of them.
"""

from __future__ import annotations

import contextlib
import itertools
import math

import numpy as np
from scipy.special import erf

__all__ = [
    "Tensor", "ShapeError", "NonFiniteError", "GraphConsumedError",
    "tensor", "constant", "no_grad", "apply", "backward", "grad_check",
    "add", "sub", "mul", "div", "neg", "matmul", "transpose", "reshape",
    "concat", "slice_", "sum_", "mean", "exp", "log", "sqrt", "softplus",
    "tanh", "sigmoid", "gelu", "clip", "expand", "logsumexp", "cmatmul",
]

_counter = itertools.count()
_recording = [True]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class GraphConsumedError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_id",
                 "op", "_consumed")

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None, op="leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite value produced by '{op}'")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._vjp = _vjp
        self._id = next(_counter)
        self.op = op
        self._consumed = False

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
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op!r}, requires_grad={self.requires_grad})"

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

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad=False):
    return Tensor(data, requires_grad=requires_grad)


def constant(data):
    return data if isinstance(data, Tensor) else Tensor(data)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording; results are plain constants."""
    prev = _recording[0]
    _recording[0] = False
    try:
        yield
    finally:
        _recording[0] = prev


def _make(value, parents, vjp, op):
    needs = _recording[0] and any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(value, op=op)
    return Tensor(value, requires_grad=True, _parents=parents, _vjp=vjp, op=op)


def _is_scalar(t):
    return t.data.ndim == 0


def _binary_operands(a, b, op):
    a = constant(a)
    b = constant(b)
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


def _unbroadcast(g, t):
    # reduce a gradient back onto a scalar operand
    if _is_scalar(t) and g.ndim > 0:
        return np.asarray(g.sum())
    return g


# --- elementwise -----------------------------------------------------------

def add(a, b):
    a, b = _binary_operands(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)), "add")


def sub(a, b):
    a, b = _binary_operands(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)), "sub")


def mul(a, b):
    a, b = _binary_operands(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a), _unbroadcast(g * a.data, b)), "mul")


def div(a, b):
    a, b = _binary_operands(a, b, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / b.data, a),
                            _unbroadcast(-g * out / b.data, b)), "div")


def neg(a):
    a = constant(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a):
    a = constant(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = constant(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a):
    a = constant(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def softplus(a):
    a = constant(a)
    x = a.data
    out = np.logaddexp(0.0, x)
    return _make(out, (a,), lambda g: (g * _sigmoid(x),), "softplus")


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    a = constant(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a):
    a = constant(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a):
    """Exact GELU, x * Phi(x)."""
    a = constant(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    out = x * cdf

    def vjp(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make(out, (a,), vjp, "gelu")


def clip(a, lo, hi):
    a = constant(a)
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return _make(np.clip(x, lo, hi), (a,), lambda g: (g * inside,), "clip")


# --- structural ------------------------------------------------------------

def matmul(a, b):
    a = constant(a)
    b = constant(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g), "matmul")


def cmatmul(a, b):
    """Complex matrix product of paired real tensors, shapes [2,m,k] @ [2,k,n]."""
    a = constant(a)
    b = constant(b)
    if (a.ndim != 3 or b.ndim != 3 or a.shape[0] != 2 or b.shape[0] != 2
            or a.shape[2] != b.shape[1]):
        raise ShapeError(f"cmatmul: shape mismatch {a.shape} vs {b.shape}")
    ar, ai = a.data
    br, bi = b.data
    out = np.stack([ar @ br - ai @ bi, ar @ bi + ai @ br])

    def vjp(g):
        gr, gi = g
        # adjoint of complex matmul: dA = G B^H, dB = A^H G
        ga = np.stack([gr @ br.T + gi @ bi.T, gi @ br.T - gr @ bi.T])
        gb = np.stack([ar.T @ gr + ai.T @ gi, ar.T @ gi - ai.T @ gr])
        return ga, gb

    return _make(out, (a, b), vjp, "cmatmul")


def transpose(a, axes=None):
    a = constant(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,),
                 lambda g: (np.transpose(g, inv),), "transpose")


def reshape(a, shape):
    a = constant(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from exc
    return _make(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def concat(tensors, axis=0):
    tensors = [constant(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: shape mismatch {ref} vs {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), vjp, "concat")


def slice_(a, index):
    a = constant(a)
    out = a.data[index]

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), (a,), vjp, "slice")


def expand(a, axis, n):
    """Insert a new axis of length ``n`` at ``axis`` by repetition."""
    a = constant(a)
    out = np.repeat(np.expand_dims(a.data, axis), n, axis=axis)
    return _make(out, (a,), lambda g: (g.sum(axis=axis),), "expand")


def sum_(a, axis=None):
    a = constant(a)
    out = a.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.full(a.shape, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _make(out, (a,), vjp, "sum")


def mean(a, axis=None):
    a = constant(a)
    n = a.size if axis is None else a.shape[axis]
    return mul(sum_(a, axis), 1.0 / n)


def logsumexp(a, axis=-1):
    a = constant(a)
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    shifted = np.exp(x - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out = (np.log(total) + m).squeeze(axis)
    soft = shifted / total
    return _make(out, (a,), lambda g: (np.expand_dims(g, axis) * soft,), "logsumexp")


_KINDS = {
    "add": add, "sub": sub, "mul": mul, "div": div, "neg": neg,
    "matmul": matmul, "cmatmul": cmatmul, "transpose": transpose,
    "reshape": reshape, "concat": lambda *ts, axis=0: concat(ts, axis),
    "slice": slice_, "sum": sum_, "mean": mean, "exp": exp, "log": log,
    "sqrt": sqrt, "softplus": softplus, "tanh": tanh, "sigmoid": sigmoid,
    "gelu": gelu, "clip": clip, "expand": expand, "logsumexp": logsumexp,
}


def apply(op_kind, *operands, **kwargs):
    """Dispatch a primitive by name."""
    try:
        fn = _KINDS[op_kind]
    except KeyError:
        raise ValueError(f"unknown op kind {op_kind!r}") from None
    return fn(*operands, **kwargs)


# --- reverse pass ----------------------------------------------------------

def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf.

    Intermediate nodes keep the gradient of their own value in ``.grad``.
    A graph can be walked once; a second call raises GraphConsumedError.
    """
    if not isinstance(loss, Tensor) or loss.size != 1 or loss.ndim > 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {getattr(loss, 'shape', None)}")
    if loss._consumed:
        raise GraphConsumedError("backward already called on this graph")
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("loss is not finite")
    if not loss.requires_grad:
        return

    nodes = {}
    stack = [loss]
    while stack:
        node = stack.pop()
        if node._id in nodes:
            continue
        if node._consumed:
            raise GraphConsumedError(f"node '{node.op}' belongs to a consumed graph")
        nodes[node._id] = node
        for p in node._parents:
            if p.requires_grad and p._id not in nodes:
                stack.append(p)

    grads = {loss._id: np.ones_like(loss.data)}
    for nid in sorted(nodes, reverse=True):
        node = nodes[nid]
        g = grads.pop(nid, None)
        if g is None:
            g = np.zeros_like(node.data)
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        node.grad = g
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            prev = grads.get(parent._id)
            grads[parent._id] = pg if prev is None else prev + pg
        node._vjp = None
        node._consumed = True


def grad_check(f, point, tol=1e-5, step=1e-4):
    """Compare the reverse-mode gradient of scalar ``f`` with central differences.

    ``point`` is a Tensor or a list of Tensors (the parameters).  Returns a
    dict with the per-parameter maximum relative discrepancy, the overall
    maximum, and a pass flag.
    """
    params = [point] if isinstance(point, Tensor) else list(point)
    for p in params:
        p.requires_grad = True
        p.grad = None
    out = f()
    backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    per_param = []
    for p, ga in zip(params, analytic):
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            with no_grad():
                hi = f().item()
            flat[i] = orig - step
            with no_grad():
                lo = f().item()
            flat[i] = orig
            if not (math.isfinite(hi) and math.isfinite(lo)):
                raise NonFiniteError("non-finite output while probing")
            numeric.reshape(-1)[i] = (hi - lo) / (2.0 * step)
        per_param.append(_rel_error(ga, numeric))
        p.grad = None
    worst = max(per_param) if per_param else 0.0
    return {"per_param": per_param, "max_rel_error": worst, "passed": worst <= tol,
            "analytic": analytic}


def _rel_error(a, b):
    # relative error with an absolute floor so exact zeros compare cleanly
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
