"""Dense float64 arrays with tape-based reverse-mode differentiation.

Every operation records its parents and a closure that pushes the output
gradient back to them.  ``backward`` walks the recorded graph once in reverse
topological order and then releases it.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

_grad_enabled = True


@contextmanager
def no_grad():
    """Run operations without recording them on the tape."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


_branch_log = None


@contextmanager
def record_branches():
    """Collect the branch masks of piecewise ops (relu, clip_min) evaluated inside."""
    global _branch_log
    prev, _branch_log = _branch_log, []
    try:
        yield _branch_log
    finally:
        _branch_log = prev


def _log_branch(mask: np.ndarray) -> None:
    if _branch_log is not None:
        _branch_log.append(mask.copy())


class GraphConsumedError(RuntimeError):
    pass


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"non-finite values produced by {op}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, "Tensor()")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple = ()
        self._backward = None
        self._consumed = False
        self.name = name

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple, backward, op: str) -> "Tensor":
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = _grad_enabled and any(p.requires_grad for p in parents)
        out.grad = None
        out._consumed = False
        out.name = None
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- operators ------------------------------------------------------------

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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

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


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise binary ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._from_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._from_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._from_op(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def backward(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return Tensor._from_op(out, (a, b), backward, "div")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return Tensor._from_op(out, (a, b), backward, "matmul")


# -- elementwise unary ------------------------------------------------------------


def neg(x: Tensor) -> Tensor:
    return Tensor._from_op(-x.data, (x,), lambda g: (-g,), "neg")


def power(x: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)

    def backward(g):
        return (g * exponent * x.data ** (exponent - 1.0),)

    return Tensor._from_op(x.data**exponent, (x,), backward, "pow")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise FloatingPointError("log of non-positive value")
    return Tensor._from_op(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def log1p(x: Tensor) -> Tensor:
    return Tensor._from_op(np.log1p(x.data), (x,), lambda g: (g / (1.0 + x.data),), "log1p")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return Tensor._from_op(out, (x,), lambda g: (0.5 * g / out,), "sqrt")


def sin(x: Tensor) -> Tensor:
    return Tensor._from_op(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),), "sin")


def cos(x: Tensor) -> Tensor:
    return Tensor._from_op(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),), "cos")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _log_branch(mask)
    return Tensor._from_op(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    c = np.sqrt(2.0 / np.pi)
    v = x.data
    inner = c * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward(g):
        dinner = c * (1.0 + 3 * 0.044715 * v * v)
        return (g * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * dinner),)

    return Tensor._from_op(out, (x,), backward, "gelu")


def _sigmoid_np(v: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = _sigmoid_np(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(x: Tensor) -> Tensor:
    v = x.data
    out = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))
    return Tensor._from_op(out, (x,), lambda g: (g * _sigmoid_np(v),), "softplus")


def clip_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor); gradient passes only where x > floor."""
    mask = x.data > floor
    _log_branch(mask)
    return Tensor._from_op(np.where(mask, x.data, floor), (x,), lambda g: (g * mask,), "clip_min")


# -- reductions and shape ---------------------------------------------------------


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._from_op(np.asarray(out, dtype=np.float64), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    return Tensor._from_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    out = np.transpose(x.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))
    return Tensor._from_op(out, (x,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(x: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        raise TypeError("index with numpy arrays, not Tensors")
    out = x.data[index]

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return Tensor._from_op(np.array(out, dtype=np.float64), (x,), backward, "getitem")


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor._from_op(out, tuple(tensors), backward, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return Tensor._from_op(out, tuple(tensors), backward, "stack")


# -- normalisers ------------------------------------------------------------------


def _masked_softmax_np(v: np.ndarray, axis: int, mask) -> np.ndarray:
    if mask is None:
        shifted = v - v.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
    else:
        # max over admissible entries only, so masked values never touch the result
        vmax = np.where(mask, v, -np.inf).max(axis=axis, keepdims=True)
        if not np.isfinite(vmax).all():
            raise ValueError("softmax row with every entry masked")
        e = np.where(mask, np.exp(np.where(mask, v - vmax, 0.0)), 0.0)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1, temperature: float = 1.0, mask=None) -> Tensor:
    """Softmax of ``x / temperature`` along ``axis``.

    ``mask`` (boolean, broadcastable to ``x``) marks admissible entries;
    excluded entries get probability exactly 0.
    """
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if np.isnan(x.data).any():
        raise ValueError("NaN input to softmax")
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    out = _masked_softmax_np(x.data / temperature, axis, mask)

    def backward(g):
        dot = np.sum(g * out, axis=axis, keepdims=True)
        return (out * (g - dot) / temperature,)

    return Tensor._from_op(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1, temperature: float = 1.0) -> Tensor:
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    v = x.data / temperature
    shifted = v - v.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    p = np.exp(out)

    def backward(g):
        return ((g - p * g.sum(axis=axis, keepdims=True)) / temperature,)

    return Tensor._from_op(out, (x,), backward, "log_softmax")


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    vmax = x.data.max(axis=axis, keepdims=True)
    s = np.exp(x.data - vmax)
    total = s.sum(axis=axis, keepdims=True)
    out_k = vmax + np.log(total)
    weights = s / total
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * weights,)

    return Tensor._from_op(out, (x,), backward, "logsumexp")


def softmax_rows(m: Tensor, temperature: float = 1.0) -> Tensor:
    """Row-wise temperature softmax of a rank-2 tensor."""
    m = as_tensor(m)
    if m.ndim != 2:
        raise ValueError(f"softmax_rows expects rank 2, got shape {m.shape}")
    return softmax(m, axis=1, temperature=temperature)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = mean(centered * centered, axis=-1, keepdims=True)
    return centered / sqrt(var + eps) * gain + bias


def dropout(x: Tensor, p: float, rng, enabled: bool = True) -> Tensor:
    """Inverted dropout: zero each entry with probability ``p``, rescale survivors."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
    if not enabled or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * keep


# -- reverse pass -----------------------------------------------------------------


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack_ = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    The recorded graph is released afterwards; a second call raises.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphConsumedError("computation graph already consumed by an earlier backward()")
    if not loss.requires_grad:
        loss._consumed = True
        return
    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in order:
        if node._backward is not None:
            node._parents = ()
            node._backward = None
    loss._consumed = True
