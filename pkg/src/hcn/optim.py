"""Adam with bias correction, exponential learning-rate decay, and a
per-parameter weight-decay registry."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .tensor import Tensor


@dataclass
class TrainState:
    """Optimizer state: step counter, moments, schedule, and decay registry.

    The learning rate decays continuously: lr(step) = base * rate^(step/every).
    Weight decay is coupled (added to the gradient before the moment updates)
    and applies only to parameters named in ``weight_decay``.
    """

    base_lr: float = 1e-3
    decay_rate: float = 0.99
    decay_every: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    step: int = 0
    weight_decay: dict = field(default_factory=dict)
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def learning_rate(self, step: int | None = None) -> float:
        s = self.step if step is None else step
        return self.base_lr * self.decay_rate ** (s / self.decay_every)


def adam_step(state: TrainState, params) -> float:
    """One update over ``params`` (a name -> Tensor mapping); returns the lr used.

    Parameters with no accumulated gradient are treated as having zero
    gradient, so a decay-registered parameter still shrinks.  NaN gradients
    abort with the offending parameter named.
    """
    items = params.items() if hasattr(params, "items") else params
    lr = state.learning_rate()
    t = state.step + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, tensor in items:
        if not isinstance(tensor, Tensor):
            raise TypeError(f"parameter {name!r} is not a Tensor")
        grad = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        if grad.shape != tensor.data.shape:
            raise ShapeError(f"parameter {name!r}: grad shape {grad.shape} != {tensor.data.shape}")
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        coeff = state.weight_decay.get(name, 0.0)
        if coeff:
            grad = grad + coeff * tensor.data
        if name not in state.m:
            state.m[name] = np.zeros_like(tensor.data)
            state.v[name] = np.zeros_like(tensor.data)
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * grad
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * grad * grad
        m_hat = m / bc1
        v_hat = v / bc2
        tensor.data = tensor.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    state.step = t
    return lr
