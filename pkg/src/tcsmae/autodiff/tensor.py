"""Reverse-mode differentiable arrays backed by float64 numpy storage.

Each :class:`Tensor` remembers the tensors it was computed from and a closure
that pushes its gradient back to them. ``backward`` walks the graph in reverse
topological order.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float64


class NonFiniteError(FloatingPointError):
    """Raised as soon as an operation produces NaN or Inf."""


def _check_finite(values, where):
    if not np.isfinite(values).all():
        bad = np.argwhere(~np.isfinite(values))[0]
        raise NonFiniteError(f"non-finite value in {where} at index {tuple(int(i) for i in bad)}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad=False, name=None, _parents=(), _op="leaf"):
        data = np.array(data, dtype=DTYPE, copy=True) if not isinstance(data, np.ndarray) \
            else np.ascontiguousarray(data, dtype=DTYPE)
        _check_finite(data, name or _op)
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(data) if self.requires_grad else None
        self.name = name
        self._parents = _parents
        self._backward = None
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data.copy()

    def item(self):
        return float(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{label})"

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {self.shape}")
        _check_finite(self.data, "loss")

        order, seen = [], set()
        stack = [(self, False)]
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
                if id(parent) not in seen:
                    stack.append((parent, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    _check_finite(g, f"gradient of {node.name or 'leaf'}")
                    node.grad += g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not _needs_grad(parent):
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # operator sugar; definitions live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __getitem__(self, index):
        from . import ops
        return ops.index(self, index)


def _needs_grad(t):
    # a node needs a gradient if it is a trainable leaf or has a recorded backward
    return t.requires_grad or t._backward is not None


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make_result(data, parents, backward, op):
    """Wrap an op's output; backward is dropped when no parent needs gradients."""
    out = Tensor.__new__(Tensor)
    data = np.asarray(data, dtype=DTYPE)
    _check_finite(data, op)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out.name = None
    out._op = op
    if any(_needs_grad(p) for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out
