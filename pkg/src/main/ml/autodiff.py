"""
Tape-based reverse-mode differentiation over dense float64 matrices.
Every trainable objective in the pipeline is built from the ops below and
differentiated with Tape.backward().
"""

from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from src.utils.errors import DimensionError, NumericalError, ParameterError, ValidationError

Tensor = np.ndarray

SYMMETRY_TOL = 1e-9


def as_tensor(values) -> Tensor:
    """Coerce scalars, vectors and matrices to a 2-D float64 array (vectors become columns)."""
    arr = np.array(values, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise DimensionError('autodiff', 'values', f'expected at most 2 dimensions, got {arr.ndim}')
    return arr


class Node:
    __slots__ = ('tape', 'op', 'parents', 'value', 'grad', 'requires_grad', 'name', '_backward')

    def __init__(self, tape: 'Tape', op: str, value: Tensor, parents: Tuple['Node', ...] = (),
                 backward: Optional[Callable[[Tensor], Sequence[Tensor]]] = None,
                 requires_grad: bool = False, name: Optional[str] = None):
        self.tape = tape
        self.op = op
        self.parents = parents
        self.value = value
        self.grad = np.zeros_like(value)
        self.requires_grad = requires_grad
        self.name = name
        self._backward = backward

    @property
    def shape(self) -> Tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def item(self) -> float:
        if self.value.size != 1:
            raise DimensionError('autodiff', self.op, f'item() on non-scalar of shape {self.shape}')
        return float(self.value[0, 0])

    def __repr__(self):
        label = f' {self.name!r}' if self.name else ''
        return f'Node({self.op}{label}, shape={self.shape})'


class Tape:
    """Records nodes in creation order; reversed creation order is a valid topological order."""

    def __init__(self):
        self.nodes: List[Node] = []

    def variable(self, value, name: Optional[str] = None) -> Node:
        node = Node(self, 'variable', as_tensor(value).copy(), requires_grad=True, name=name)
        _check_finite(node)
        self.nodes.append(node)
        return node

    def constant(self, value, name: Optional[str] = None) -> Node:
        node = Node(self, 'constant', as_tensor(value), name=name)
        self.nodes.append(node)
        return node

    def record(self, op: str, value: Tensor, parents: Tuple[Node, ...],
               backward: Callable[[Tensor], Sequence[Tensor]]) -> Node:
        for parent in parents:
            if parent.tape is not self:
                raise ValidationError('autodiff', op, 'operands belong to different tapes')
        requires_grad = any(p.requires_grad for p in parents)
        node = Node(self, op, value, parents, backward, requires_grad)
        _check_finite(node)
        self.nodes.append(node)
        return node

    def zero_grad(self):
        for node in self.nodes:
            node.grad = np.zeros_like(node.value)

    def backward(self, loss: Node) -> Dict[str, Tensor]:
        """
        Accumulate dLoss/dNode into every node reachable from loss.

        Returns:
            Mapping of variable name to its gradient (unnamed variables are omitted)
        """
        if loss.tape is not self:
            raise ValidationError('autodiff', 'loss', 'loss node belongs to a different tape')
        if loss.value.size != 1:
            raise DimensionError('autodiff', 'loss', f'backward needs a scalar root, got shape {loss.shape}')

        self.zero_grad()
        loss.grad = np.ones_like(loss.value)
        stop = self.nodes.index(loss)

        for node in reversed(self.nodes[:stop + 1]):
            if node._backward is None or not node.requires_grad:
                continue
            parent_grads = node._backward(node.grad)
            for parent, g in zip(node.parents, parent_grads):
                if parent.requires_grad:
                    parent.grad = parent.grad + g

        for node in self.nodes:
            if node.op == 'variable' and not np.all(np.isfinite(node.grad)):
                raise NumericalError('autodiff', node.name or 'variable', 'gradient is non-finite')
        return {n.name: n.grad for n in self.nodes if n.op == 'variable' and n.name is not None}


def _check_finite(node: Node):
    if not np.all(np.isfinite(node.value)):
        raise NumericalError('autodiff', node.op, 'produced a non-finite value')


def _same_shape(op: str, a: Node, b: Node):
    if a.shape != b.shape:
        raise DimensionError('autodiff', op, f'shape mismatch {a.shape} vs {b.shape}')


def matmul(a: Node, b: Node) -> Node:
    if a.cols != b.rows:
        raise DimensionError('autodiff', 'matmul', f'cannot multiply {a.shape} by {b.shape}')
    av, bv = a.value, b.value
    return a.tape.record('matmul', av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a: Node, b: Node) -> Node:
    _same_shape('add', a, b)
    return a.tape.record('add', a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Node, b: Node) -> Node:
    _same_shape('sub', a, b)
    return a.tape.record('sub', a.value - b.value, (a, b), lambda g: (g, -g))


def hadamard(a: Node, b: Node) -> Node:
    _same_shape('hadamard', a, b)
    av, bv = a.value, b.value
    return a.tape.record('hadamard', av * bv, (a, b), lambda g: (g * bv, g * av))


def sigmoid(a: Node) -> Node:
    y = expit(a.value)
    return a.tape.record('sigmoid', y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Node) -> Node:
    y = np.tanh(a.value)
    return a.tape.record('tanh', y, (a,), lambda g: (g * (1.0 - y * y),))


def scale(a: Node, factor: float) -> Node:
    factor = float(factor)
    return a.tape.record('scale', a.value * factor, (a,), lambda g: (g * factor,))


ELEMENTWISE_KINDS = ('add', 'sub', 'hadamard', 'sigmoid', 'tanh', 'scale')


def elementwise(a: Node, kind: str, other: Optional[Node] = None, factor: Optional[float] = None) -> Node:
    """Dispatch to one of the elementwise ops by name."""
    if kind in ('add', 'sub', 'hadamard'):
        if other is None:
            raise ParameterError('autodiff', kind, 'binary op needs a second operand')
        return {'add': add, 'sub': sub, 'hadamard': hadamard}[kind](a, other)
    if kind == 'sigmoid':
        return sigmoid(a)
    if kind == 'tanh':
        return tanh(a)
    if kind == 'scale':
        if factor is None:
            raise ParameterError('autodiff', kind, 'scale needs a factor')
        return scale(a, factor)
    raise ParameterError('autodiff', 'kind', f'unknown elementwise op {kind!r}, expected one of {ELEMENTWISE_KINDS}')


def add_row(a: Node, bias: Node) -> Node:
    """Add a 1×k row vector to every row of an m×k node."""
    if bias.rows != 1 or bias.cols != a.cols:
        raise DimensionError('autodiff', 'add_row', f'bias shape {bias.shape} does not broadcast over {a.shape}')
    return a.tape.record('add_row', a.value + bias.value, (a, bias),
                         lambda g: (g, g.sum(axis=0, keepdims=True)))


def transpose(a: Node) -> Node:
    return a.tape.record('transpose', a.value.T.copy(), (a,), lambda g: (g.T,))


def slice_cols(a: Node, start: int, stop: int) -> Node:
    if not 0 <= start < stop <= a.cols:
        raise DimensionError('autodiff', 'slice_cols', f'columns [{start}, {stop}) out of range for {a.shape}')
    shape = a.shape

    def backward(g):
        full = np.zeros(shape)
        full[:, start:stop] = g
        return (full,)

    return a.tape.record('slice_cols', a.value[:, start:stop].copy(), (a,), backward)


def add_all(nodes: Sequence[Node]) -> Node:
    """Left fold of add over a non-empty sequence."""
    if not nodes:
        raise ParameterError('autodiff', 'nodes', 'cannot sum an empty sequence')
    total = nodes[0]
    for node in nodes[1:]:
        total = add(total, node)
    return total


def frobenius_sq(a: Node) -> Node:
    av = a.value
    value = np.array([[np.sum(av * av)]])
    return a.tape.record('frobenius_sq', value, (a,), lambda g: (2.0 * g[0, 0] * av,))


def dirichlet(lap: Tensor, x: Node) -> Node:
    """tr(xᵀ L x) for a symmetric L."""
    lap = as_tensor(lap)
    if lap.shape[0] != lap.shape[1]:
        raise DimensionError('autodiff', 'dirichlet', f'Laplacian must be square, got {lap.shape}')
    if lap.shape[0] != x.rows:
        raise DimensionError('autodiff', 'dirichlet', f'Laplacian size {lap.shape[0]} != x rows {x.rows}')
    if np.max(np.abs(lap - lap.T), initial=0.0) > SYMMETRY_TOL:
        raise ValidationError('autodiff', 'dirichlet', 'Laplacian is not symmetric')
    xv = x.value
    lx = lap @ xv
    value = np.array([[np.sum(xv * lx)]])
    sym = lap + lap.T
    return x.tape.record('dirichlet', value, (x,), lambda g: (g[0, 0] * (sym @ xv),))


def masked_bce(logits: Node, targets: Tensor, mask: Tensor) -> Node:
    """Mean binary cross-entropy over masked entries, computed from logits."""
    targets = as_tensor(targets)
    mask = as_tensor(mask)
    if targets.shape != logits.shape or mask.shape != logits.shape:
        raise DimensionError('autodiff', 'masked_bce',
                             f'logits {logits.shape}, targets {targets.shape}, mask {mask.shape} must match')
    count = float(mask.sum())
    if count == 0:
        raise ParameterError('autodiff', 'mask', 'empty mask: mean cross-entropy is undefined')
    masked_targets = targets[mask > 0]
    if np.any((masked_targets != 0) & (masked_targets != 1)):
        raise ValidationError('autodiff', 'targets', 'targets must be 0 or 1 under the mask')

    z = logits.value
    # softplus(z) - t*z == -[t log σ(z) + (1-t) log(1-σ(z))]
    per_entry = np.logaddexp(0.0, z) - targets * z
    value = np.array([[np.sum(mask * per_entry) / count]])
    probs = expit(z)
    return logits.tape.record('masked_bce', value, (logits,),
                              lambda g: (g[0, 0] * mask * (probs - targets) / count,))
