"""Minimal reverse-mode autodiff over dense NCHW numpy arrays.

Every structured kernel (convolution, warping, ...) lives in `flowdet.ops`;
this module only provides the graph machinery plus the elementwise /
fully-connected operations that are cheap to express directly.

Determinism contract: all forward results depend only on the input values,
never on thread count.  Reductions accumulate in float64 and are cast back
to the input dtype on storage.
"""

from contextlib import contextmanager

import numpy as np

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    """A numpy array plus an optional backward closure.

    `data` keeps whatever float dtype it was created with; float32 for the
    inference pipeline, float64 in the gradient-check suites.
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev", "name")

    def __init__(self, data, requires_grad=False, name=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._backward = None
        self._prev = ()
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g.astype(self.data.dtype, copy=False)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Reverse-mode sweep from this node in topological order."""
        topo, visited = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for child in node._prev:
                if id(child) not in visited:
                    stack.append((child, False))

        if grad is None:
            grad = np.ones_like(self.data)
        self.accumulate_grad(np.asarray(grad))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # -- elementwise arithmetic ------------------------------------------

    def __add__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, other)
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return shift(self, -other)
        return add(self, scale(other, -1.0))

    def __rsub__(self, other):
        if isinstance(other, (int, float)):
            return shift(scale(self, -1.0), other)
        return add(as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return multiply(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def sum(self):
        return reduce_sum(self)

    def mean(self):
        return scale(reduce_sum(self), 1.0 / self.size)

    def reshape(self, *shape):
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(out_data, inputs, backward_fn):
    """Wrap an op result; records `backward_fn(upstream)` when grads are on.

    `backward_fn` must return one gradient array (or None) per input, in
    order.  Inputs that are plain arrays are treated as constants.
    """
    tensors = [t for t in inputs if isinstance(t, Tensor)]
    needs = _GRAD_ENABLED and any(t.requires_grad or t._prev for t in tensors)
    out = Tensor(out_data, requires_grad=needs)
    if needs:
        out._prev = tuple(tensors)

        def _backward(upstream):
            grads = backward_fn(upstream)
            for inp, g in zip(inputs, grads):
                if g is not None and isinstance(inp, Tensor):
                    inp.accumulate_grad(g)

        out._backward = _backward
    return out


# -- primitive elementwise ops -----------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return make_op(a.data + b.data, (a, b), lambda up: (up, up))


def multiply(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"multiply: shape mismatch {a.shape} vs {b.shape}")
    return make_op(a.data * b.data, (a, b), lambda up: (up * b.data, up * a.data))


def scale(a, s):
    a = as_tensor(a)
    s = float(s)
    return make_op(a.data * s, (a,), lambda up: (up * s,))


def shift(a, s):
    a = as_tensor(a)
    return make_op(a.data + float(s), (a,), lambda up: (up,))


def reduce_sum(a):
    a = as_tensor(a)
    total = np.asarray(a.data, dtype=np.float64).sum().astype(a.dtype)
    return make_op(total, (a,), lambda up: (np.broadcast_to(up, a.shape).copy(),))


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return make_op(a.data.reshape(shape), (a,), lambda up: (up.reshape(old),))


def sigmoid(a):
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.data))
    return make_op(out, (a,), lambda up: (up * out * (1.0 - out),))


def relu(a):
    a = as_tensor(a)
    mask = a.data >= 0
    return make_op(np.where(mask, a.data, 0), (a,), lambda up: (up * mask,))


def fc(x, weight, bias=None):
    """Fully connected layer: (N, D) x (O, D)^T + bias -> (N, O)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"fc: shape mismatch x{x.shape} vs weight{weight.shape}")
    xd = x.data.astype(np.float64, copy=False)
    wd = weight.data.astype(np.float64, copy=False)
    out = (xd @ wd.T).astype(x.dtype)
    if bias is not None:
        out = out + bias.data

    def backward(up):
        up64 = up.astype(np.float64, copy=False)
        dx = up64 @ wd
        dw = up64.T @ xd
        db = up64.sum(axis=0) if bias is not None else None
        return (dx, dw) + ((db,) if bias is not None else ())

    inputs = (x, weight) + ((bias,) if bias is not None else ())
    return make_op(out, inputs, backward)


def softmax(a, axis=1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(up):
        dot = (up * out).sum(axis=axis, keepdims=True)
        return ((up - dot) * out,)

    return make_op(out, (a,), backward)
