"""Define-by-run tape for reverse-mode differentiation over float64 arrays.

Every op evaluates its primal eagerly and appends a record to the tape, so the
tape order is already a topological order of the graph. ``backward`` walks the
records once, last to first.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when an op receives operands of incompatible shape."""


class TapeError(ValueError):
    pass


VJP = Callable[[np.ndarray], Sequence[np.ndarray | None]]


def as_tensor(value, *, check_finite: bool = True) -> np.ndarray:
    arr = np.array(value, dtype=np.float64)
    if check_finite and not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite entries")
    arr.flags.writeable = False
    return arr


class Node:
    """One value on a tape: a leaf, or the output of a recorded op."""

    __slots__ = ("tape", "id", "op", "inputs", "value", "vjp", "name")

    def __init__(self, tape: Tape, id: int, op: str, inputs: tuple[Node, ...],
                 value: np.ndarray, vjp: VJP | None, name: str | None = None):
        self.tape = tape
        self.id = id
        self.op = op
        self.inputs = inputs
        self.value = value
        self.vjp = vjp
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def describe(self) -> str:
        label = f" '{self.name}'" if self.name else ""
        return f"node #{self.id} ({self.op}{label}, shape {self.shape})"

    def __repr__(self) -> str:
        return f"Node({self.describe()})"

    # Arithmetic sugar; the ops module holds the actual definitions.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(self.tape.const(other), self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __mul__(self, other):
        from . import ops
        if isinstance(other, Node):
            return ops.mul(self, other)
        return ops.scale(self, other)

    __rmul__ = __mul__


class Tape:
    """Ordered record of operations. Not thread-safe; use one tape per pass."""

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(self, op: str, inputs: tuple[Node, ...], value: np.ndarray,
                vjp: VJP | None, name: str | None = None) -> Node:
        for parent in inputs:
            if parent.tape is not self:
                raise TapeError(f"{parent.describe()} belongs to a different tape")
        node = Node(self, len(self.nodes), op, inputs, value, vjp, name)
        self.nodes.append(node)
        return node

    def leaf(self, value, name: str | None = None) -> Node:
        """A differentiable input (parameters, perturbations)."""
        return self._append("leaf", (), as_tensor(value), None, name)

    def const(self, value, name: str | None = None) -> Node:
        return self._append("const", (), as_tensor(value), None, name)

    def record(self, op: str, inputs: Iterable[Node], value, vjp: VJP) -> Node:
        inputs = tuple(inputs)
        arr = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"op '{op}' produced non-finite values "
                                     f"(inputs: {', '.join(p.describe() for p in inputs)})")
        arr = as_tensor(arr, check_finite=False)
        return self._append(op, inputs, arr, vjp)


@dataclass
class GradientResult:
    value: float
    grads: dict[int, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, key: Node | int) -> np.ndarray:
        return self.grads[key.id if isinstance(key, Node) else key]


def forward(node: Node) -> np.ndarray:
    """Primal value of ``node``; ops evaluate eagerly, so this is a lookup."""
    return node.value


def backward(tape: Tape, objective: Node, wrt: Iterable[Node | int]) -> GradientResult:
    """Exact reverse-mode gradients of a scalar ``objective`` w.r.t. ``wrt`` leaves."""
    if objective.tape is not tape:
        raise TapeError(f"objective {objective.describe()} is not on this tape")
    if objective.value.size != 1:
        raise ShapeError(f"objective {objective.describe()} is not scalar")

    wanted: list[int] = []
    for item in wrt:
        if isinstance(item, Node):
            if item.tape is not tape:
                raise TapeError(f"{item.describe()} is not on this tape")
            idx = item.id
        else:
            idx = int(item)
        if not 0 <= idx < len(tape.nodes) or tape.nodes[idx].op not in ("leaf", "const"):
            raise TapeError(f"requested gradient for id {idx}, which is not a leaf on this tape")
        wanted.append(idx)

    adjoint: dict[int, np.ndarray] = {objective.id: np.ones_like(objective.value)}
    for node in reversed(tape.nodes[: objective.id + 1]):
        g = adjoint.pop(node.id, None) if node.vjp is not None else adjoint.get(node.id)
        if g is None or node.vjp is None:
            continue
        for parent, pg in zip(node.inputs, node.vjp(g)):
            if pg is None:
                continue
            if parent.id in adjoint:
                adjoint[parent.id] = adjoint[parent.id] + pg
            else:
                adjoint[parent.id] = pg

    grads = {}
    for idx in wanted:
        leaf = tape.nodes[idx]
        g = adjoint.get(idx)
        grads[idx] = np.zeros_like(leaf.value) if g is None else np.asarray(g, dtype=np.float64).reshape(leaf.shape)
    return GradientResult(value=float(objective.value.reshape(())), grads=grads)
