"""Dense float64 tensors with a reverse-mode gradient engine.

Every operation that touches a tensor with ``requires_grad`` records its
parents and a backward rule on the output.  Calling :meth:`Tensor.backward`
sorts the recorded graph topologically (the *tape*) and propagates gradients
from the root to every leaf, accumulating additively into ``leaf.grad``.

Broadcasting is restricted to scalar-with-tensor.  Row-bias addition is
provided by the fused :func:`linear` op instead.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np
from scipy import sparse

from .exceptions import DimensionError, NonFiniteError, TapeStateError

__all__ = [
    "Tensor",
    "as_tensor",
    "no_grad",
    "is_grad_enabled",
    "matmul",
    "linear",
    "add",
    "sub",
    "mul",
    "neg",
    "sigmoid",
    "tanh",
    "leaky_relu",
    "swish",
    "elementwise",
    "activation",
    "segment_sum",
    "gather_rows",
    "concat",
    "reduce_sum",
    "reduce_mean",
    "mse_loss",
    "custom_backward_hook",
    "build_tape",
]

DEFAULT_LEAKY_SLOPE = 0.01

_state = threading.local()


def is_grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable recording for the enclosed block (per thread)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_hooks", "op")

    def __init__(self, data, requires_grad=False, *, _parents=(), _backward=None, op="leaf"):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        if op == "leaf":
            _finite(arr, "tensor construction")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self._hooks = []
        self.op = op

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
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

    def __len__(self):
        return self.data.shape[0]

    # operators -----------------------------------------------------------
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
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self):
        return reduce_sum(self)

    def mean(self):
        return reduce_mean(self)

    # backward ------------------------------------------------------------
    def backward(self, grad=None):
        """Propagate ``grad`` (default 1 for scalars) to every leaf."""
        if not self.requires_grad:
            raise TapeStateError("backward() called on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(
                    f"backward() without an explicit gradient needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.shape:
                raise DimensionError(f"gradient shape {grad.shape} does not match tensor {self.shape}")

        tape = build_tape(self)
        grads = {id(self): grad}
        for node in reversed(tape):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            for hook in node._hooks:
                g = np.asarray(hook(g), dtype=np.float64)
            if node._backward is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def build_tape(root):
    """Topologically ordered list of recorded nodes reachable from ``root``.

    Every record appears after all of its inputs.
    """
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(arr, op):
    # a single reduction is cheaper than an elementwise mask; overflow of the
    # sum itself falls through to the exact check
    if np.isfinite(np.add.reduce(arr, axis=None)):
        return arr
    if not np.isfinite(arr).all():
        bad = "NaN" if np.isnan(arr).any() else "Inf"
        raise NonFiniteError(f"{op} produced {bad}")
    return arr


def _make(data, parents, backward, op):
    _finite(data, op)
    track = is_grad_enabled() and any(p.requires_grad for p in parents)
    if not track:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)


def _is_scalar(t):
    return t.data.ndim == 0 or t.data.size == 1 and t.data.ndim <= 1


def _check_binary(a, b, op):
    if a.shape == b.shape or _is_scalar(a) or _is_scalar(b):
        return
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


# linear algebra -------------------------------------------------------------
def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward, "matmul")


def linear(x, weight, bias=None):
    """``x @ weight + bias`` with ``bias`` broadcast over rows."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise DimensionError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out += bias.data
        parents.append(bias)

    def backward(g):
        grads = [
            g @ weight.data.T if x.requires_grad else None,
            x.data.T @ g if weight.requires_grad else None,
        ]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _make(out, parents, backward, "linear")


# elementwise ----------------------------------------------------------------
def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a, b, "mul")

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    with np.errstate(invalid="ignore", over="ignore"):
        out = a.data * b.data
    return _make(out, (a, b), backward, "mul")


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def _sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a):
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def tanh(a):
    a = as_tensor(a)
    t = np.tanh(a.data)
    return _make(t, (a,), lambda g: (g * (1.0 - t * t),), "tanh")


def leaky_relu(a, slope=DEFAULT_LEAKY_SLOPE):
    a = as_tensor(a)
    pos = a.data > 0
    out = np.where(pos, a.data, slope * a.data)
    return _make(out, (a,), lambda g: (np.where(pos, g, slope * g),), "leaky_relu")


def swish(a):
    a = as_tensor(a)
    s = _sigmoid(a.data)
    out = a.data * s
    return _make(out, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),), "swish")


_UNARY = {"sigmoid": sigmoid, "tanh": tanh, "leaky_relu": leaky_relu, "swish": swish}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op, *args, slope=DEFAULT_LEAKY_SLOPE):
    """Dispatch an elementwise op by name."""
    if op in _BINARY:
        return _BINARY[op](*args)
    if op == "leaky_relu":
        return leaky_relu(*args, slope=slope)
    if op in _UNARY:
        return _UNARY[op](*args)
    raise ValueError(f"unknown elementwise op {op!r}")


def activation(name, x):
    """Apply a named activation; ``identity`` returns ``x`` unchanged."""
    if name in (None, "identity"):
        return as_tensor(x)
    return elementwise(name, x)


def activation_grad(name, x):
    """Pointwise derivative of a named activation on a plain array."""
    if name in (None, "identity"):
        return np.ones_like(x)
    if name == "leaky_relu":
        return np.where(x > 0, 1.0, DEFAULT_LEAKY_SLOPE)
    if name == "tanh":
        t = np.tanh(x)
        return 1.0 - t * t
    if name == "sigmoid":
        s = _sigmoid(x)
        return s * (1.0 - s)
    if name == "swish":
        s = _sigmoid(x)
        return s + x * s * (1.0 - s)
    raise ValueError(f"unknown activation {name!r}")


def activation_apply(name, x):
    """Plain-array forward of a named activation (no recording)."""
    if name in (None, "identity"):
        return x
    if name == "leaky_relu":
        return np.where(x > 0, x, DEFAULT_LEAKY_SLOPE * x)
    if name == "tanh":
        return np.tanh(x)
    if name == "sigmoid":
        return _sigmoid(x)
    if name == "swish":
        return x * _sigmoid(x)
    raise ValueError(f"unknown activation {name!r}")


# indexing and graph ops -------------------------------------------------------
def _getitem(a, index):
    out = a.data[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(out), (a,), backward, "getitem")


def _check_ids(ids, bound, what):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1:
        raise DimensionError(f"{what}: index list must be 1-D, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= bound):
        raise IndexError(f"{what}: index out of range for size {bound}")
    return ids


def scatter_matrix(ids, num):
    """Sparse ``(num, len(ids))`` 0/1 matrix routing row ``k`` to ``ids[k]``."""
    n = len(ids)
    return sparse.csr_matrix((np.ones(n), (ids, np.arange(n))), shape=(num, n))


def _scatter_rows(values, ids, num):
    if values.ndim == 2 and values.shape[0]:
        return np.asarray(scatter_matrix(ids, num) @ values)
    out = np.zeros((num,) + values.shape[1:], dtype=np.float64)
    np.add.at(out, ids, values)
    return out


def segment_sum(values, segment_ids, num_segments):
    """Row ``s`` of the result is the sum of value rows whose id is ``s``."""
    values = as_tensor(values)
    ids = _check_ids(segment_ids, num_segments, "segment_sum")
    if values.ndim < 1 or values.shape[0] != ids.shape[0]:
        raise DimensionError(f"segment_sum: {ids.shape[0]} ids for values of shape {values.shape}")
    out = _scatter_rows(values.data, ids, num_segments)
    return _make(out, (values,), lambda g: (g[ids],), "segment_sum")


def gather_rows(values, index):
    """Select rows ``values[index]``; backward scatters gradients back."""
    values = as_tensor(values)
    ids = _check_ids(index, values.shape[0], "gather_rows")
    n = values.shape[0]
    return _make(values.data[ids], (values,), lambda g: (_scatter_rows(g, ids, n),), "gather_rows")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat: empty tensor list")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for k, (s, r) in enumerate(zip(t.shape, ref)) if k != ax
        ):
            raise DimensionError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return np.split(g, bounds, axis=ax)

    return _make(out, tensors, backward, "concat")


def reduce_sum(a):
    a = as_tensor(a)
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.full_like(a.data, g),), "sum")


def reduce_mean(a):
    a = as_tensor(a)
    n = max(a.data.size, 1)
    return _make(np.asarray(a.data.mean()), (a,), lambda g: (np.full_like(a.data, g / n),), "mean")


def mse_loss(pred, target):
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target.data
    n = max(diff.size, 1)

    def backward(g):
        d = 2.0 * g * diff / n
        return d, -d

    return _make(np.asarray((diff * diff).mean()), (pred, target), backward, "mse")


def custom_backward_hook(output, rule):
    """Replace the gradient arriving at ``output`` with ``rule(incoming)``.

    The hook fires once the gradient of ``output`` is fully accumulated and
    before it is passed on to the inputs of ``output``.
    """
    if not isinstance(output, Tensor) or not output.requires_grad:
        raise TapeStateError("cannot attach a backward hook to a tensor outside a live tape")
    output._hooks.append(rule)
    return output
