"""
Dense float64 tensors with tape-based reverse-mode automatic differentiation.

Every operation returns a new Tensor that remembers its parents and a closure
mapping the upstream gradient to one gradient per parent. The graph is rebuilt
on every forward pass; ``backward()`` walks it in reverse topological order.
"""
import logging
import threading
from contextlib import contextmanager

import numpy as np

logger = logging.getLogger("multisource_qa.core.tensor")

_state = threading.local()


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


def is_grad_enabled():
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Disable graph construction in the current thread."""
    previous = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def as_tensor(value):
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class Tensor:
    """A numpy array plus the bookkeeping needed for backpropagation."""

    # make ndarray (op) Tensor defer to the Tensor operators
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = ""

    @classmethod
    def _from_op(cls, data, parents, backward, op):
        out = cls(data)
        if is_grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
            out._op = op
        return out

    # ------------------------------------------------------------------ #
    # Basic accessors
    # ------------------------------------------------------------------ #
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}, op={self._op or 'leaf'})"

    # ------------------------------------------------------------------ #
    # Backward pass
    # ------------------------------------------------------------------ #
    def backward(self):
        """Populate ``.grad`` on every tensor in the graph that requires it.

        Gradients accumulate across calls; callers zero them explicitly.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return

        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # ------------------------------------------------------------------ #
    # Elementwise arithmetic
    # ------------------------------------------------------------------ #
    def __add__(self, other):
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return Tensor._from_op(self.data + other.data, (self, other), backward, "add")

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)

        return Tensor._from_op(self.data - other.data, (self, other), backward, "sub")

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return Tensor._from_op(a * b, (self, other), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)

        return Tensor._from_op(a / b, (self, other), backward, "div")

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __neg__(self):
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            raise TypeError("tensor exponents are not supported")
        a = self.data

        def backward(g):
            return (g * exponent * a ** (exponent - 1),)

        return Tensor._from_op(a ** exponent, (self,), backward, "pow")

    def exp(self):
        out = np.exp(self.data)
        return Tensor._from_op(out, (self,), lambda g: (g * out,), "exp")

    def log(self):
        a = self.data
        return Tensor._from_op(np.log(a), (self,), lambda g: (g / a,), "log")

    def sqrt(self):
        out = np.sqrt(self.data)

        def backward(g):
            # zero at the origin instead of inf
            safe = np.where(out > 0, out, 1.0)
            return (np.where(out > 0, 0.5 * g / safe, 0.0),)

        return Tensor._from_op(out, (self,), backward, "sqrt")

    def abs(self):
        sign = np.sign(self.data)
        return Tensor._from_op(np.abs(self.data), (self,), lambda g: (g * sign,), "abs")

    def relu(self):
        on = self.data > 0
        return Tensor._from_op(np.where(on, self.data, 0.0), (self,), lambda g: (g * on,), "relu")

    # ------------------------------------------------------------------ #
    # Reductions and shape manipulation
    # ------------------------------------------------------------------ #
    def sum(self, axis=None, keepdims=False):
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._from_op(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward, "sum")

    def mean(self, axis=None, keepdims=False):
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) / float(count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        original = self.shape
        return Tensor._from_op(self.data.reshape(shape), (self,), lambda g: (g.reshape(original),), "reshape")

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor._from_op(self.data.transpose(axes), (self,), lambda g: (g.transpose(inverse),), "transpose")

    def swap_last(self):
        """Swap the two trailing axes."""
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return self.transpose(axes)

    def __getitem__(self, index):
        shape = self.shape
        parts = index if isinstance(index, tuple) else (index,)
        advanced = any(isinstance(p, (list, np.ndarray)) for p in parts)

        def backward(g):
            grad = np.zeros(shape)
            if advanced:
                # repeated indices must accumulate
                np.add.at(grad, index, g)
            else:
                grad[index] = g
            return (grad,)

        return Tensor._from_op(self.data[index], (self,), backward, "index")

    def masked_fill(self, mask, value):
        """Replace entries where ``mask`` is True with a constant."""
        mask = np.asarray(mask, dtype=bool)
        shape = self.shape

        def backward(g):
            return (_unbroadcast(np.where(mask, 0.0, g), shape),)

        return Tensor._from_op(np.where(mask, value, self.data), (self,), backward, "masked_fill")

    # ------------------------------------------------------------------ #
    # Linear algebra
    # ------------------------------------------------------------------ #
    def __matmul__(self, other):
        return matmul(self, other)

    def softmax(self, axis=-1):
        return softmax(self, axis)


def matmul(a, b):
    """Matrix product over the trailing two axes; leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    x, y = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(y, -1, -2)
        gb = np.swapaxes(x, -1, -2) @ g
        return _unbroadcast(ga, x.shape), _unbroadcast(gb, y.shape)

    return Tensor._from_op(x @ y, (a, b), backward, "matmul")


def softmax(x, axis=-1):
    """Numerically stable softmax; ``-inf`` entries receive zero weight."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._from_op(out, (x,), backward, "softmax")


def layer_norm(x, gain, eps=1e-6):
    """Normalize the last axis to zero mean, unit variance, then scale by ``gain``."""
    x, gain = as_tensor(x), as_tensor(gain)
    if gain.ndim != 1 or x.shape[-1] != gain.shape[0]:
        raise ShapeError(f"layer_norm gain {gain.shape} does not match input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    gain_data = gain.data

    def backward(g):
        dxhat = g * gain_data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        dgain = (g * xhat).reshape(-1, gain_data.shape[0]).sum(axis=0)
        return dx, dgain

    return Tensor._from_op(xhat * gain_data, (x, gain), backward, "layer_norm")


def cross_entropy(logits, targets, pad_id=0):
    """Mean negative log-likelihood over positions whose target is not ``pad_id``."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy expects logits [T, V] and targets [T], got {logits.shape} and {targets.shape}")
    vocab = logits.shape[1]
    keep = targets != pad_id
    count = int(keep.sum())
    if count == 0:
        raise ValueError("cross_entropy: every target position is padding")
    if np.any((targets[keep] < 0) | (targets[keep] >= vocab)):
        raise ValueError(f"cross_entropy: target ids outside [0, {vocab})")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    rows = np.nonzero(keep)[0]
    loss = -log_probs[rows, targets[rows]].sum() / count

    def backward(g):
        grad = np.exp(log_probs)
        grad[rows, targets[rows]] -= 1.0
        grad[~keep] = 0.0
        return (grad * (g / count),)

    return Tensor._from_op(np.asarray(loss), (logits,), backward, "cross_entropy")


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._from_op(data, tuple(tensors), backward, "concat")


def scatter_rows(values, rows, n_rows):
    """Place ``values[i]`` at row ``rows[i]`` of a zero [n_rows, ...] tensor. Rows must be unique."""
    values = as_tensor(values)
    rows = np.asarray(rows, dtype=np.int64)
    out = np.zeros((n_rows,) + values.shape[1:])
    out[rows] = values.data
    return Tensor._from_op(out, (values,), lambda g: (g[rows],), "scatter_rows")


def zero_grad(params):
    for p in params:
        p.grad = None
