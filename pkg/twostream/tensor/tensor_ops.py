#!/usr/bin/env python3

"""
Forward operations and their gradient rules.

Broadcasting is limited to one case: a 1-d right operand whose extent equals the last extent of the left
operand (biases, layer-norm gamma/beta). Everything else must match exactly.
"""

import math
from typing import List, Optional, Sequence, Union

import numpy as np

from twostream.errors import ContractError, DimensionError, TokenIndexError
from twostream.tensor.tensor_base import Tensor


GELU_COEFF = math.sqrt(2.0 / math.pi)
MASK_BIAS = -1e9


def constant(data: Union[np.ndarray, Sequence, float], like: Tensor) -> Tensor:
    """
    Wrap fixed values in a tensor with the same dtype as `like`; constants never receive gradients.
    :param data:
    :param like:
    :return:
    """
    return Tensor(np.asarray(data), dtype=like.dtype)


def _trailing_broadcast(op: str, a: Tensor, b: Tensor) -> bool:
    """
    Check the operand shapes of a binary elementwise op.
    :return: True when b is a 1-d vector broadcast along a's last axis, False when shapes are identical
    """
    if a.shape == b.shape:
        return False
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return True
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to_trailing(grad: np.ndarray, extent: int) -> np.ndarray:
    return grad.reshape(-1, extent).sum(axis=0)


def _check_axis(op: str, x: Tensor, axis: int) -> int:
    if not -x.ndim <= axis < x.ndim:
        raise ContractError(f"{op}: axis {axis} is invalid for shape {x.shape}")
    return axis % x.ndim


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """
    Matrix product of a (m×k) and b (k×n).
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")

    def rule(g: np.ndarray):
        return g @ b.data.T, a.data.T @ g

    return Tensor.from_op(a.data @ b.data, "matmul", (a, b), rule)


def add(a: Tensor, b: Tensor) -> Tensor:
    broadcast = _trailing_broadcast("add", a, b)

    def rule(g: np.ndarray):
        return g, _reduce_to_trailing(g, b.shape[0]) if broadcast else g

    return Tensor.from_op(a.data + b.data, "add", (a, b), rule)


def sub(a: Tensor, b: Tensor) -> Tensor:
    broadcast = _trailing_broadcast("sub", a, b)

    def rule(g: np.ndarray):
        return g, -_reduce_to_trailing(g, b.shape[0]) if broadcast else -g

    return Tensor.from_op(a.data - b.data, "sub", (a, b), rule)


def mul(a: Tensor, b: Tensor) -> Tensor:
    broadcast = _trailing_broadcast("mul", a, b)

    def rule(g: np.ndarray):
        grad_b = g * a.data
        return g * b.data, _reduce_to_trailing(grad_b, b.shape[0]) if broadcast else grad_b

    return Tensor.from_op(a.data * b.data, "mul", (a, b), rule)


def scale(a: Tensor, factor: float) -> Tensor:
    def rule(g: np.ndarray):
        return (g * factor,)

    return Tensor.from_op(a.data * factor, "scale", (a,), rule)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """
    Join tensors along an existing axis.
    """
    if not tensors:
        raise ContractError("concat: needs at least one tensor")
    first = tensors[0]
    axis = _check_axis("concat", first, axis)
    for t in tensors[1:]:
        if t.ndim != first.ndim or any(
            t.shape[i] != first.shape[i] for i in range(first.ndim) if i != axis
        ):
            raise DimensionError(f"concat: shape {t.shape} does not match {first.shape} off axis {axis}")
    boundaries = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def rule(g: np.ndarray):
        return np.split(g, boundaries, axis=axis)

    return Tensor.from_op(np.concatenate([t.data for t in tensors], axis=axis), "concat", tuple(tensors), rule)


def slice_axis(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    """
    Take the half-open range [start, stop) along one axis.
    """
    axis = _check_axis("slice", x, axis)
    if not 0 <= start <= stop <= x.shape[axis]:
        raise DimensionError(f"slice: range [{start}, {stop}) is outside extent {x.shape[axis]} of shape {x.shape}")
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def rule(g: np.ndarray):
        grad = np.zeros_like(x.data)
        grad[index] = g
        return (grad,)

    return Tensor.from_op(x.data[index], "slice", (x,), rule)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose: expects a matrix, got shape {x.shape}")

    def rule(g: np.ndarray):
        return (g.T,)

    return Tensor.from_op(x.data.T, "transpose", (x,), rule)


def total(x: Tensor, axis: Optional[int] = None) -> Tensor:
    """
    Sum over one axis, or over everything into a single-element tensor.
    """
    if axis is None:

        def rule_all(g: np.ndarray):
            return (np.full_like(x.data, g.reshape(-1)[0]),)

        return Tensor.from_op(np.asarray(x.data.sum()), "sum", (x,), rule_all)

    axis = _check_axis("sum", x, axis)

    def rule(g: np.ndarray):
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return Tensor.from_op(x.data.sum(axis=axis), "sum", (x,), rule)


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    if axis is None:
        if x.size == 0:
            raise ContractError("mean: empty tensor has no mean")
        return scale(total(x), 1.0 / x.size)
    axis = _check_axis("mean", x, axis)
    if x.shape[axis] == 0:
        raise ContractError(f"mean: axis {axis} of shape {x.shape} is empty")
    return scale(total(x, axis), 1.0 / x.shape[axis])


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool = True) -> Tensor:
    """
    Inverted dropout with a mask drawn from `rng`; identity when p is 0, out of training, or without an rng.
    """
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout: rate {p} must lie in [0, 1)")
    if p == 0.0 or not training or rng is None:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)

    def rule(g: np.ndarray):
        return (g * keep,)

    return Tensor.from_op(x.data * keep, "dropout", (x,), rule)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis("softmax", x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exps = np.exp(shifted)
    probs = exps / exps.sum(axis=axis, keepdims=True)

    def rule(g: np.ndarray):
        return (probs * (g - (g * probs).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(probs, "softmax", (x,), rule)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _check_axis("log_softmax", x, axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - log_norm

    def rule(g: np.ndarray):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor.from_op(out, "log_softmax", (x,), rule)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-12) -> Tensor:
    """
    Normalize each row over the last axis to zero mean and unit variance, then apply gamma ⊙ x̂ + beta.
    """
    width = x.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise DimensionError(
            f"layer_norm: gamma {gamma.shape} and beta {beta.shape} must both be ({width},) for input {x.shape}"
        )
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    normed = centered * inv_std

    def rule(g: np.ndarray):
        d_normed = g * gamma.data
        d_x = inv_std * (
            d_normed
            - d_normed.mean(axis=-1, keepdims=True)
            - normed * (d_normed * normed).mean(axis=-1, keepdims=True)
        )
        return d_x, _reduce_to_trailing(g * normed, width), _reduce_to_trailing(g, width)

    return Tensor.from_op(normed * gamma.data + beta.data, "layer_norm", (x, gamma, beta), rule)


def gelu(x: Tensor) -> Tensor:
    """
    GELU, tanh approximation.
    """
    inner = GELU_COEFF * (x.data + 0.044715 * x.data ** 3)
    t = np.tanh(inner)

    def rule(g: np.ndarray):
        d_inner = GELU_COEFF * (1.0 + 3.0 * 0.044715 * x.data ** 2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x.data * (1.0 - t ** 2) * d_inner),)

    return Tensor.from_op(0.5 * x.data * (1.0 + t), "gelu", (x,), rule)


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)

    def rule(g: np.ndarray):
        return (g * (1.0 - t ** 2),)

    return Tensor.from_op(t, "tanh", (x,), rule)


def embedding_lookup(table: Tensor, ids: Union[Sequence[int], np.ndarray]) -> Tensor:
    """
    Gather rows of a V×d table; the gradient scatter-adds back into the gathered rows.
    """
    if table.ndim != 2:
        raise DimensionError(f"embedding_lookup: table must be a matrix, got shape {table.shape}")
    index = np.asarray(ids, dtype=np.int64).reshape(-1)
    for token in index:
        if not 0 <= token < table.shape[0]:
            raise TokenIndexError(f"embedding_lookup: id {int(token)} is out of range for {table.shape[0]} rows")

    def rule(g: np.ndarray):
        grad = np.zeros_like(table.data)
        np.add.at(grad, index, g)
        return (grad,)

    return Tensor.from_op(table.data[index], "embedding_lookup", (table,), rule)


def nll(log_probs: Tensor, targets: Union[Sequence[int], np.ndarray]) -> Tensor:
    """
    Mean negative log-likelihood of one target class per row of an N×C log-probability matrix.
    """
    index = np.asarray(targets, dtype=np.int64).reshape(-1)
    if log_probs.ndim != 2 or log_probs.shape[0] != index.shape[0]:
        raise DimensionError(f"nll: {index.shape[0]} targets for log-probabilities of shape {log_probs.shape}")
    if index.shape[0] == 0:
        raise ContractError("nll: no rows to score")
    if np.any(index < 0) or np.any(index >= log_probs.shape[1]):
        raise TokenIndexError(f"nll: target ids {index.tolist()} exceed {log_probs.shape[1]} classes")
    rows = np.arange(index.shape[0])
    count = index.shape[0]

    def rule(g: np.ndarray):
        grad = np.zeros_like(log_probs.data)
        grad[rows, index] = -g.reshape(-1)[0] / count
        return (grad,)

    return Tensor.from_op(np.asarray(-log_probs.data[rows, index].mean()), "nll", (log_probs,), rule)


def sigmoid_array(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def bce_with_logits(logits: Tensor, targets: Union[Sequence, np.ndarray]) -> Tensor:
    """
    Mean binary cross-entropy between sigmoid(logits) and real targets in [0, 1], computed stably.
    """
    target = np.asarray(targets, dtype=logits.dtype).reshape(logits.shape)
    if logits.size == 0:
        raise ContractError("bce_with_logits: no logits to score")
    x = logits.data
    losses = np.maximum(x, 0.0) - x * target + np.log1p(np.exp(-np.abs(x)))
    count = logits.size

    def rule(g: np.ndarray):
        return ((sigmoid_array(x) - target) * (g.reshape(-1)[0] / count),)

    return Tensor.from_op(np.asarray(losses.mean()), "bce_with_logits", (logits,), rule)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    target = tuple(int(s) for s in shape)
    if int(np.prod(target)) != x.size:
        raise DimensionError(f"reshape: cannot view shape {x.shape} as {target}")

    def rule(g: np.ndarray):
        return (g.reshape(x.shape),)

    return Tensor.from_op(x.data.reshape(target), "reshape", (x,), rule)


def stack_rows(tensors: List[Tensor]) -> Tensor:
    """
    Stack single-row (or single-element) tensors into a k×n matrix.
    """
    return concat([t if t.ndim == 2 else reshape(t, (1, t.size)) for t in tensors], axis=0)
