"""Tape-based reverse-mode differentiation over numpy arrays.

Every differentiable primitive computes its forward value eagerly and, when a
:class:`Tape` is active, appends one node holding a closure that maps the
output gradient to input gradients.  Nodes are appended in creation order, so
replaying the tape backwards is always a valid reverse topological order.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "RankError",
    "DegenerateRowError",
    "Tensor",
    "Tape",
    "parameter",
    "constant",
    "record_op",
    "active_tape",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class RankError(ValueError):
    """A tensor has the wrong rank for the requested operation."""


class DegenerateRowError(ValueError):
    """A softmax row has no finite entry."""


_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> "Tape | None":
    tapes = _stack()
    return tapes[-1] if tapes else None


class _Node:
    __slots__ = ("inputs", "backward", "shape")

    def __init__(self, inputs, backward, shape):
        self.inputs = inputs
        self.backward = backward
        self.shape = shape


class Tape:
    """Ordered record of primitive operations.

    Use as a context manager; operations executed inside the block are
    recorded and :meth:`backward` replays them in reverse.  A tape belongs to
    the thread that entered it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, shape, inputs, backward) -> int:
        self.nodes.append(_Node(inputs, backward, shape))
        return len(self.nodes) - 1

    def backward(self, loss: "Tensor", params: Iterable["Tensor"] | None = None) -> dict:
        """Return ``{parameter: gradient}`` for ``loss``.

        Gradients of every reachable leaf with ``requires_grad`` are also
        stored on ``leaf.grad``.  Any tensor listed in ``params`` that the loss
        does not reach is reported with a zero gradient.
        """
        if loss.data.size != 1 or loss.data.ndim > 1:
            raise RankError(f"backward needs a scalar loss, got shape {loss.shape}")
        params = list(params) if params is not None else []
        leaf_grads: dict[int, np.ndarray] = {}
        leaves: dict[int, Tensor] = {}

        def push_leaf(t: Tensor, g: np.ndarray) -> None:
            key = id(t)
            if key in leaf_grads:
                leaf_grads[key] = leaf_grads[key] + g
            else:
                leaf_grads[key] = g
                leaves[key] = t

        if loss.node is None or loss._tape is not self:
            if loss.requires_grad:
                push_leaf(loss, np.ones_like(loss.data))
        else:
            grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
            for idx in range(loss.node, -1, -1):
                g = grads.pop(idx, None)
                if g is None:
                    continue
                node = self.nodes[idx]
                in_grads = node.backward(g)
                for inp, ig in zip(node.inputs, in_grads):
                    if ig is None:
                        continue
                    if inp.node is not None and inp._tape is self:
                        prev = grads.get(inp.node)
                        grads[inp.node] = ig if prev is None else prev + ig
                    elif inp.requires_grad:
                        push_leaf(inp, ig)

        out = {}
        for key, t in leaves.items():
            t.grad = leaf_grads[key]
            out[t] = t.grad
        for p in params:
            if p not in out:
                p.grad = np.zeros_like(p.data)
                out[p] = p.grad
        return out


class Tensor:
    """A float64 array that may take part in a tape.

    Leaves created with ``requires_grad=True`` are parameters.  Tensors built
    outside any tape (or from inputs that need no gradient) are detached and
    never receive gradient.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "_tape", "name")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self.node = None
        self._tape = None
        self.name = name

    # ------------------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self.node is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, tracked={self.tracked})"

    def __hash__(self) -> int:
        return id(self)

    def __eq__(self, other) -> bool:
        return self is other

    # operator sugar ---------------------------------------------------
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

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __rmatmul__(self, other):
        from . import ops
        return ops.matmul(other, self)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    @property
    def T(self):
        from . import ops
        return ops.transpose(self, None)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True, name=name)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def record_op(
    out_data: np.ndarray,
    inputs: Sequence[Tensor],
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]],
) -> Tensor:
    """Wrap ``out_data`` as the result of a primitive over ``inputs``.

    ``backward(g)`` must return one gradient (or ``None``) per input, each
    with the shape of that input.  Nothing is recorded without an active tape
    or when no input is tracked.
    """
    out = Tensor(out_data)
    tape = active_tape()
    if tape is None or not any(t.tracked for t in inputs):
        return out
    out.node = tape.record(out.data.shape, tuple(inputs), backward)
    out._tape = tape
    return out
