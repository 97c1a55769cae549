#!/usr/bin/env python3

"""
Central finite-difference checks of the gradient rules.
"""

from dataclasses import dataclass
from logging import getLogger
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from twostream.tensor import tensor_ops as ops
from twostream.tensor.tensor_base import Tensor, backward


logger = getLogger("twostream")

GRADCHECK_STEP = 1e-5
GRADCHECK_TOLERANCE = 1e-4
# Gradients smaller than this are compared absolutely rather than relatively.
RELATIVE_FLOOR = 1e-3


@dataclass
class GradcheckResult:
    max_relative_error: float
    checked: int
    worst: Optional[Tuple[str, Tuple[int, ...]]] = None

    def passed(self, tolerance: float = GRADCHECK_TOLERANCE) -> bool:
        return self.max_relative_error < tolerance


def relative_error(analytic: float, numeric: float, floor: float = RELATIVE_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradcheck(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    step: float = GRADCHECK_STEP,
    samples: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradcheckResult:
    """
    Compare the gradients backward() assigns to `inputs` against central finite differences of `fn`.
    :param fn: Rebuilds the graph from the inputs and returns a single-element loss
    :param inputs: Tensors to perturb; they must require gradients
    :param step: Finite-difference step
    :param samples: If given, check only this many randomly chosen entries across all inputs
    :param rng: Source of the sampled entries
    :return:
    """
    for tensor in inputs:
        tensor.zero_grad()
    backward(fn())
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    entries: List[Tuple[int, Tuple[int, ...]]] = [
        (k, tuple(int(i) for i in idx)) for k, t in enumerate(inputs) for idx in np.ndindex(*t.shape)
    ]
    if samples is not None and samples < len(entries):
        rng = rng or np.random.default_rng(0)
        chosen = rng.choice(len(entries), size=samples, replace=False)
        entries = [entries[i] for i in sorted(chosen)]

    result = GradcheckResult(max_relative_error=0.0, checked=0)
    for k, idx in entries:
        data = inputs[k].data
        original = data[idx]
        data[idx] = original + step
        upper = fn().item()
        data[idx] = original - step
        lower = fn().item()
        data[idx] = original
        numeric = (upper - lower) / (2.0 * step)
        error = relative_error(float(analytic[k][idx]), numeric)
        result.checked += 1
        if error > result.max_relative_error:
            result.max_relative_error = error
            result.worst = (inputs[k].name or f"input{k}", idx)
    return result


def projected(out: Tensor, rng: np.random.Generator) -> Tensor:
    """
    Reduce a tensor to a scalar through a fixed random weighting, so every output entry matters.
    """
    weights = ops.constant(rng.standard_normal(out.shape), like=out)
    return ops.total(ops.mul(out, weights))


def _random(rng: np.random.Generator, shape: Tuple[int, ...], name: str) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True, name=name, dtype=np.float64)


Case = Tuple[Callable[..., Tensor], List[Tensor]]


def _op_cases(rng: np.random.Generator, m: int, n: int, k: int) -> Dict[str, Case]:
    """
    One gradcheck case per op for a given draw of extents: (builder taking the inputs, inputs).
    """
    a = _random(rng, (m, k), "a")
    b = _random(rng, (k, n), "b")
    x = _random(rng, (m, n), "x")
    y = _random(rng, (m, n), "y")
    v = _random(rng, (n,), "v")
    gamma = _random(rng, (n,), "gamma")
    beta = _random(rng, (n,), "beta")
    table = _random(rng, (k + 1, n), "table")
    ids = rng.integers(0, k + 1, size=m + 1)
    targets = rng.integers(0, n, size=m)
    soft = rng.random((m, n))
    dropout_seed = int(rng.integers(0, 2 ** 31))
    start = int(rng.integers(0, n))
    return {
        "matmul": (lambda p, q: ops.matmul(p, q), [a, b]),
        "add": (lambda p, q: ops.add(p, q), [x, y]),
        "add_bias": (lambda p, q: ops.add(p, q), [x, v]),
        "sub": (lambda p, q: ops.sub(p, q), [x, y]),
        "mul": (lambda p, q: ops.mul(p, q), [x, y]),
        "mul_bias": (lambda p, q: ops.mul(p, q), [x, v]),
        "scale": (lambda p: ops.scale(p, -1.7), [x]),
        "concat": (lambda p, q: ops.concat([p, q], axis=1), [x, y]),
        "slice": (lambda p: ops.slice_axis(p, start, n, axis=1), [x]),
        "transpose": (lambda p: ops.transpose(p), [x]),
        "reshape": (lambda p: ops.reshape(p, (n, m)), [x]),
        "sum": (lambda p: ops.total(p, axis=0), [x]),
        "mean": (lambda p: ops.mean(p, axis=1), [x]),
        "softmax": (lambda p: ops.softmax(p, axis=-1), [x]),
        "log_softmax": (lambda p: ops.log_softmax(p, axis=-1), [x]),
        "layer_norm": (lambda p, g, bb: ops.layer_norm(p, g, bb, eps=1e-12), [x, gamma, beta]),
        "gelu": (lambda p: ops.gelu(p), [x]),
        "tanh": (lambda p: ops.tanh(p), [x]),
        "dropout": (lambda p: ops.dropout(p, 0.3, np.random.default_rng(dropout_seed)), [x]),
        "embedding_lookup": (lambda t: ops.embedding_lookup(t, ids), [table]),
        "nll": (lambda p: ops.nll(ops.log_softmax(p), targets), [x]),
        "bce_with_logits": (lambda p: ops.bce_with_logits(p, soft), [x]),
    }


def run_op_suite(seed: int = 0, shapes: int = 5) -> Dict[str, float]:
    """
    Gradient-check every differentiable op on several random shapes.
    :param seed:
    :param shapes: How many random extent draws per op
    :return: The worst relative error seen per op
    """
    rng = np.random.default_rng(seed)
    worst: Dict[str, float] = {}
    for _ in range(shapes):
        m, n, k = (int(e) for e in rng.integers(2, 6, size=3))
        for name, (builder, inputs) in _op_cases(rng, m, n, k).items():
            weight_rng_seed = int(rng.integers(0, 2 ** 31))

            def loss(builder=builder, inputs=inputs, weight_rng_seed=weight_rng_seed) -> Tensor:
                return projected(builder(*inputs), np.random.default_rng(weight_rng_seed))

            result = gradcheck(loss, inputs)
            worst[name] = max(worst.get(name, 0.0), result.max_relative_error)
            logger.debug("gradcheck %s (%s, %s, %s): %.3e", name, m, n, k, result.max_relative_error)
    return worst
