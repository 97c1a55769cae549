#!/usr/bin/env python3

"""
Dense tensors that record the operations producing them, and the reverse-mode pass over that record.

A Tensor wraps a row-major numpy array. Operations in twostream.tensor.tensor_ops build new tensors and,
when any input requires a gradient, attach the inputs and a gradient rule to the output. backward() walks
the recorded Graph in reverse topological order and accumulates gradients into every tensor that asked
for one.
"""

import contextlib
from logging import getLogger
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from twostream.errors import ContractError, NumericalError


logger = getLogger("twostream")

ArrayLike = Union[np.ndarray, Sequence, float, int]
# Given the output gradient, return one gradient (or None) per parent.
GradRule = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]

_grad_enabled = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """
    Suspend graph recording, for evaluation passes.
    :return:
    """
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """
    A dense n-dimensional real array participating in a reverse-mode differentiation graph.

    Tensors are never mutated by operations. Only `grad` changes after creation (accumulated by
    backward), and the optimizer updates parameter `data` in place between graphs.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "op", "_parents", "_grad_rule")

    def __init__(
        self,
        data: ArrayLike,
        requires_grad: bool = False,
        name: Optional[str] = None,
        dtype: Optional[Union[str, np.dtype]] = None,
    ) -> None:
        """
        :param data: Array contents; copied into a contiguous floating point array
        :param requires_grad: Should backward() populate `grad` for this tensor?
        :param name: Optional label, used in error messages and checkpoints
        :param dtype: Floating point dtype, defaults to the input's float dtype or float64
        """
        array = np.asarray(data)
        if dtype is not None:
            array = array.astype(dtype)
        elif not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        if array.ndim == 0:
            # Scalars are carried as single-element vectors.
            array = array.reshape(1)
        self.data: np.ndarray = np.ascontiguousarray(array)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.op = "leaf"
        self._parents: Tuple["Tensor", ...] = ()
        self._grad_rule: Optional[GradRule] = None

    @classmethod
    def from_op(
        cls, data: np.ndarray, op: str, parents: Sequence["Tensor"], grad_rule: GradRule
    ) -> "Tensor":
        """
        Build the output of an operation, recording it in the graph when a parent needs a gradient.
        :param data: The forward result
        :param op: Operation name, reported when the result is not finite
        :param parents: The tensors this result was computed from
        :param grad_rule: Maps the output gradient to one gradient per parent
        :return:
        """
        if not np.all(np.isfinite(data)):
            raise NumericalError(f"Operation '{op}' produced non-finite values")
        out = cls(data)
        out.op = op
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._grad_rule = grad_rule
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: "Tensor") -> "Tensor":
        from twostream.tensor.tensor_ops import add

        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        from twostream.tensor.tensor_ops import sub

        return sub(self, other)

    def __mul__(self, other: Union["Tensor", float]) -> "Tensor":
        from twostream.tensor.tensor_ops import mul, scale

        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    def __neg__(self) -> "Tensor":
        from twostream.tensor.tensor_ops import scale

        return scale(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        from twostream.tensor.tensor_ops import matmul

        return matmul(self, other)

    def __repr__(self) -> str:
        label = f" '{self.name}'" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"


class Graph:
    """
    The operations recorded between the leaves and one output, in topological order.

    Every node's parents appear before it, so walking `nodes` backwards visits each node after all of its
    consumers have contributed to its gradient.
    """

    def __init__(self, nodes: List[Tensor]) -> None:
        self.nodes = nodes

    @classmethod
    def from_output(cls, output: Tensor) -> "Graph":
        """
        Collect every recorded tensor reachable from `output`, iteratively to avoid recursion limits.
        :param output:
        :return:
        """
        order: List[Tensor] = []
        visited = set()
        stack: List[Tuple[Tensor, bool]] = [(output, False)]
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
                if id(parent) not in visited:
                    stack.append((parent, False))
        return cls(order)

    def __len__(self) -> int:
        return len(self.nodes)

    def operations(self) -> List[str]:
        return [n.op for n in self.nodes if n._grad_rule is not None]


def backward(loss: Tensor) -> Graph:
    """
    Populate `grad` on every requires_grad tensor reachable from a scalar loss.
    :param loss: A single-element tensor
    :return: The graph that was traversed
    """
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    graph = Graph.from_output(loss)
    seed = np.ones_like(loss.data)
    loss.grad = seed if loss.grad is None else loss.grad + seed

    for node in reversed(graph.nodes):
        if node._grad_rule is None or node.grad is None:
            continue
        parent_grads = node._grad_rule(node.grad)
        for parent, parent_grad in zip(node._parents, parent_grads):
            if parent_grad is None or not parent.requires_grad:
                continue
            if parent_grad.shape != parent.shape:
                raise ContractError(
                    f"Gradient rule of '{node.op}' returned shape {parent_grad.shape} for input of shape {parent.shape}"
                )
            parent_grad = parent_grad.astype(parent.dtype, copy=False)
            parent.grad = parent_grad.copy() if parent.grad is None else parent.grad + parent_grad
    logger.debug("Backward pass over %s recorded tensors", len(graph))
    return graph
