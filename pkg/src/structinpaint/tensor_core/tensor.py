"""Dense float64 tensors with reverse-mode differentiation.

Every differentiable op produces a ``Tensor`` holding a ``_Node`` that records
its parents and a closure mapping the output gradient to parent gradients.
Nodes carry a monotonically increasing sequence number so that the tape
reachable from a root can be replayed in exact reverse execution order.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

_sequence = itertools.count()


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


@dataclass(eq=False)
class _Node:
    parents: tuple["Tensor", ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    name: str
    seq: int = field(default_factory=lambda: next(_sequence))


class Tensor:
    """A dense row-major array of float64 values.

    Image tensors use height x width x channels layout. ``grad`` is ``None``
    until a backward pass reaches the tensor.
    """

    __slots__ = ("data", "requires_grad", "grad", "_node")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _node: _Node | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 5:
            raise DimensionError(f"tensor order {arr.ndim} exceeds 5")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node = _node

    # basic introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # operator sugar, implemented in ops ----------------------------------
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)

    def __truediv__(self, other):
        from . import ops
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return ops.mul(self, 1.0 / float(other))

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def sum(self):
        from . import ops
        return ops.sum(self)


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward, name: str) -> Tensor:
    """Wrap ``data`` as the output of an op, recording it on the tape if needed."""
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _node=_Node(tuple(parents), backward, name))
    return Tensor(data)


def tape_from(root: Tensor) -> list[_Node]:
    """Return the ops reachable from ``root`` in execution order."""
    seen: set[int] = set()
    nodes: list[_Node] = []
    stack = [root]
    while stack:
        t = stack.pop()
        node = t._node
        if node is None or id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(node.parents)
    nodes.sort(key=lambda n: n.seq)
    return nodes


def backward(root: Tensor) -> None:
    """Populate ``grad`` on every tensor with ``requires_grad`` that ``root`` depends on.

    Gradients add onto any existing ``grad`` so repeated calls accumulate.
    """
    if root.data.size != 1:
        raise DimensionError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ValueError("root does not require grad; nothing is on the tape")

    # keyed by id() of the output tensor; tensors are kept alive by the nodes
    pending: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    owners: dict[int, Tensor] = {id(root): root}
    by_node: dict[int, Tensor] = {}
    for t in _reachable_tensors(root):
        if t._node is not None:
            by_node[id(t._node)] = t

    for node in reversed(tape_from(root)):
        out = by_node[id(node)]
        g = pending.get(id(out))
        if g is None:
            continue
        for parent, pg in zip(node.parents, node.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in pending:
                pending[key] = pending[key] + pg
            else:
                pending[key] = pg
                owners[key] = parent

    for key, g in pending.items():
        t = owners[key]
        if not t.requires_grad:
            continue
        t.grad = g.copy() if t.grad is None else t.grad + g


def _reachable_tensors(root: Tensor):
    seen: set[int] = set()
    stack = [root]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        yield t
        if t._node is not None:
            stack.extend(t._node.parents)
