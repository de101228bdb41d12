"""
Tensor - dense float64 array with reverse-mode differentiation.

Every operation in ``engine.functional`` returns a new Tensor whose ``node``
records the producing op, its parents and a backward closure. ``backward``
walks the recorded graph in reverse creation order, so each node is visited
exactly once and contributions from shared subexpressions are summed.
"""

import itertools
import logging
import threading
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from engine.errors import ContractError, DimensionError

logger = logging.getLogger(__name__)

DTYPE = np.float64

_sequence = itertools.count()
_grad_state = threading.local()


def is_grad_enabled() -> bool:
    """True unless the current thread is inside ``no_grad()``."""
    return getattr(_grad_state, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    """
    Disable graph recording for the current thread.

    Results computed inside are plain values; calling ``backward`` on them
    raises a ContractError.
    """
    previous = is_grad_enabled()
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = previous


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Node:
    """One operation record: op kind, parent tensors and the backward rule."""

    op: str
    parents: Tuple["Tensor", ...]
    backward: BackwardFn


class Tensor:
    """
    n-dimensional float64 array participating in a differentiation graph.

    Attributes:
        data: the values (row-major numpy array)
        requires_grad: whether gradients flow to / through this tensor
        grad: accumulated gradient for leaves, same shape as data
        node: producing operation, None for leaves
        name: optional label used by checkpoints and debugging
    """

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=DTYPE, copy=True)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.name = name
        self._seq = next(_sequence)

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], op: str,
                backward: BackwardFn) -> "Tensor":
        """Wrap an op result, recording the node only when a parent needs grad."""
        out = cls.__new__(cls)
        out.data = np.asarray(data, dtype=DTYPE)
        out.grad = None
        out.name = None
        out._seq = next(_sequence)
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out.node = Node(op, tuple(parents), backward) if track else None
        return out

    # ---------- basic properties ----------

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single value, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        """Copy of the values, detached from the graph."""
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{flag}{label})"

    # ---------- operators (delegate to engine.functional) ----------

    def __add__(self, other):
        from engine import functional as F
        return F.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from engine import functional as F
        return F.sub(self, other)

    def __rsub__(self, other):
        from engine import functional as F
        return F.add(F.neg(self), other)

    def __mul__(self, other):
        from engine import functional as F
        return F.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from engine import functional as F
        if isinstance(other, Tensor):
            raise DimensionError("division is only defined by a python scalar")
        return F.mul_scalar(self, 1.0 / float(other))

    def __neg__(self):
        from engine import functional as F
        return F.neg(self)

    def __matmul__(self, other):
        from engine import functional as F
        return F.matmul(self, other)

    def reshape(self, *shape):
        from engine import functional as F
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return F.reshape(self, shape)

    def sum(self, axis=None, keepdims: bool = False):
        from engine import functional as F
        return F.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from engine import functional as F
        return F.mean(self, axis=axis, keepdims=keepdims)

    # ---------- differentiation ----------

    def _accumulate(self, grad: np.ndarray) -> None:
        if grad.shape != self.data.shape:
            raise DimensionError(
                f"gradient shape {grad.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = np.array(grad, dtype=DTYPE, copy=True)
        else:
            self.grad = self.grad + grad

    def backward(self) -> None:
        """
        Populate ``grad`` on every requires_grad leaf reachable from this loss.

        Gradients accumulate across calls until ``zero_grad`` is called on
        the leaves.
        """
        if self.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor that requires grad")

        seed = np.ones_like(self.data)
        if self.node is None:
            self._accumulate(seed)
            return

        graph = Graph.trace(self)
        pending = {id(self): seed}
        for record in reversed(graph.records):
            grad = pending.pop(id(record.output), None)
            if grad is None:
                continue
            parent_grads = record.node.backward(grad)
            for parent, parent_grad in zip(record.node.parents, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                if parent.node is None:
                    parent._accumulate(parent_grad)
                elif id(parent) in pending:
                    pending[id(parent)] = pending[id(parent)] + parent_grad
                else:
                    pending[id(parent)] = parent_grad


@dataclass
class OpRecord:
    output: Tensor
    node: Node

    @property
    def op(self) -> str:
        return self.node.op


class Graph:
    """
    Ordered operation records reachable from a root tensor.

    Records are sorted by creation order, which is a valid topological order
    because a tensor's parents always exist before it does.
    """

    def __init__(self, records: List[OpRecord]):
        self.records = records

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        seen = set()
        found: List[Tensor] = []
        stack = [root]
        while stack:
            tensor = stack.pop()
            if tensor.node is None or id(tensor) in seen:
                continue
            seen.add(id(tensor))
            found.append(tensor)
            stack.extend(tensor.node.parents)
        found.sort(key=lambda t: t._seq)
        return cls([OpRecord(t, t.node) for t in found])

    def ops(self) -> List[str]:
        return [r.op for r in self.records]

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def as_tensor(value) -> Tensor:
    """Return ``value`` unchanged if it is a Tensor, else a constant Tensor."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value, requires_grad=False)


def parameter(data, name: Optional[str] = None) -> Tensor:
    """Leaf tensor that requires grad."""
    return Tensor(data, requires_grad=True, name=name)
