#!/usr/bin/env python3

"""
Adam with bias correction, the linear warmup / linear decay schedule, and global-norm gradient clipping.
"""

from dataclasses import dataclass, field
from logging import getLogger
import math
from typing import Dict, Mapping

import numpy as np

from twostream.errors import ContractError, NumericalError
from twostream.tensor.tensor_base import Tensor


logger = getLogger("twostream")


@dataclass(frozen=True)
class LRSchedule:
    peak_lr: float
    warmup_steps: int
    total_steps: int

    def __post_init__(self) -> None:
        if not 0 < self.warmup_steps < self.total_steps:
            raise ContractError(
                f"schedule needs 0 < warmup_steps < total_steps, got {self.warmup_steps} and {self.total_steps}"
            )
        if self.peak_lr <= 0.0:
            raise ContractError(f"peak learning rate must be positive, got {self.peak_lr}")

    @classmethod
    def for_run(cls, peak_lr: float, total_steps: int, warmup_fraction: float = 0.1) -> "LRSchedule":
        """Warmup is warmup_fraction of the run, at least one step; runs shorter than 2 steps are stretched to 2."""
        total = max(2, total_steps)
        warmup = min(total - 1, max(1, int(round(warmup_fraction * total))))
        return cls(peak_lr=peak_lr, warmup_steps=warmup, total_steps=total)


def lr_at(step: int, schedule: LRSchedule) -> float:
    """
    Linear 0 → peak over the warmup, then linear peak → 0 at total_steps.
    """
    if not 0 <= step <= schedule.total_steps:
        raise ContractError(f"step {step} is outside the schedule [0, {schedule.total_steps}]")
    if step <= schedule.warmup_steps:
        return schedule.peak_lr * step / schedule.warmup_steps
    remaining = schedule.total_steps - step
    return schedule.peak_lr * remaining / (schedule.total_steps - schedule.warmup_steps)


@dataclass
class AdamState:
    """
    First and second moment estimates per parameter name, plus the number of updates taken.
    """

    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(
        cls, params: Mapping[str, Tensor], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
    ) -> "AdamState":
        return cls(
            m={n: np.zeros_like(t.data) for n, t in params.items()},
            v={n: np.zeros_like(t.data) for n, t in params.items()},
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )

    def ensure(self, params: Mapping[str, Tensor]) -> None:
        """Add zero moments for parameters created after the state (task heads)."""
        for name, tensor in params.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(tensor.data)
                self.v[name] = np.zeros_like(tensor.data)
            elif self.m[name].shape != tensor.shape:
                raise ContractError(
                    f"optimizer moments for '{name}' have shape {self.m[name].shape}, parameter has {tensor.shape}"
                )


def _gradient(tensor: Tensor) -> np.ndarray:
    return tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)


def global_norm(params: Mapping[str, Tensor]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(_gradient(t), dtype=np.float64))) for t in params.values()))


def clip_by_global_norm(params: Mapping[str, Tensor], max_norm: float) -> float:
    """
    Rescale every gradient so their joint L2 norm is at most max_norm (0 disables).
    :return: The norm before clipping
    """
    norm = global_norm(params)
    if max_norm > 0.0 and norm > max_norm:
        factor = max_norm / norm
        for tensor in params.values():
            if tensor.grad is not None:
                tensor.grad = (tensor.grad * factor).astype(tensor.grad.dtype)
    return norm


def adam_step(params: Mapping[str, Tensor], state: AdamState, lr: float, weight_decay: float = 0.0) -> None:
    """
    One bias-corrected Adam update of every parameter, in place. Weight decay is decoupled from the moments.
    Parameters without a gradient are treated as having a zero gradient.
    """
    for name, tensor in params.items():
        if not np.all(np.isfinite(_gradient(tensor))):
            raise NumericalError(f"Non-finite gradient for parameter '{name}' at optimizer step {state.step + 1}")
    state.ensure(params)
    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for name, tensor in params.items():
        grad = _gradient(tensor)
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * grad
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * grad * grad
        update = (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        if weight_decay:
            update = update + weight_decay * tensor.data
        tensor.data -= (lr * update).astype(tensor.dtype)
