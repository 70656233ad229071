"""Dense float64 tensor with reverse-mode gradients.

Every differentiable op builds its output through :func:`make`, which records
the parents and a backward rule. :meth:`Tensor.backward` walks the recorded
graph in reverse topological order, accumulating gradients additively into the
``.grad`` slot of every leaf with ``requires_grad``. A graph can be walked once;
after that its saved arrays are released and a second ``backward`` raises.
"""

from __future__ import annotations

import numpy as np

_check_finite = False


def set_finite_checks(enabled: bool) -> None:
    """Validate every op output for NaN/inf (slow; meant for tests and debugging)."""
    global _check_finite
    _check_finite = bool(enabled)


class GraphError(RuntimeError):
    pass


class _Node:
    __slots__ = ("parents", "backward_fn", "consumed")

    def __init__(self, parents, backward_fn):
        self.parents = parents
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node", "__weakref__")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 4:
            raise ValueError(f"tensor rank {arr.ndim} exceeds 4")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._node = None

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
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic is routed through the functional module to keep one op table
    def __add__(self, other):
        from . import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from . import functional as F
        return F.sub(other, self)

    def __mul__(self, other):
        from . import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import functional as F
        return F.mul(self, -1.0)

    def backward(self) -> None:
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("loss does not depend on any tensor requiring grad")
        order = _toposort(self)
        grads = {id(self): np.ones_like(self.data)}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            node = t._node
            if node is None:
                if t.requires_grad and g is not None:
                    t.grad = g.copy() if t.grad is None else t.grad + g
                continue
            if g is None:
                continue
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.data.shape:
                    raise GraphError(f"gradient shape {pg.shape} != {parent.data.shape}")
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        for t in order:
            if t._node is not None:
                t._node.consumed = True
                t._node.backward_fn = None


def _toposort(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        node = t._node
        if node is not None and node.consumed:
            raise GraphError("graph already used by a previous backward; run forward again")
        stack.append((t, True))
        if node is not None:
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make(data, parents, backward_fn) -> Tensor:
    """Wrap an op result and record how to push gradients to ``parents``.

    ``backward_fn(grad_out)`` returns one array (or ``None``) per parent.
    """
    if _check_finite and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite values produced by an op")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._node = _Node(tuple(parents), backward_fn)
    return out
