"""Classification and detection losses, with analytic gradients.

Losses return ``(value, gradient)`` pairs; the gradient is seeded into the
tape by the caller, which keeps scalar reductions out of the autodiff engine.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax in the max-shifted numerically stable form."""
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood over the batch; gradient wrt logits.

    ``logits`` is [B, C]; ``labels`` is [B] ints in [0, C).
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [B, C], got shape {logits.shape}")
    b, c = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels must have shape ({b},), got {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_p = shifted[np.arange(b), labels] - log_z
    loss = float(-log_p.mean())
    grad = softmax(logits)
    grad[np.arange(b), labels] -= 1.0
    return loss, grad / b


def smooth_l1(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    """Sum over components of the Huber-style penalty with transition at |d|=1.

    f(d) = 0.5 d^2 for |d| < 1, |d| - 0.5 otherwise; gradient wrt ``pred``.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"shape mismatch: {pred.shape} vs {target.shape}")
    d = pred - target
    small = np.abs(d) < 1.0
    value = float(np.where(small, 0.5 * d * d, np.abs(d) - 0.5).sum())
    grad = np.where(small, d, np.sign(d))
    return value, grad


@dataclass
class DetectionLossBatch:
    """One step's detection terms: classification over all sampled windows,
    regression over the positive ones only."""

    cls_logits: np.ndarray  # [n_cls, K]
    cls_labels: np.ndarray  # [n_cls] ints
    reg_pred: np.ndarray  # [n_pos, 2]
    reg_target: np.ndarray  # [n_pos, 2]
    lam: float = 1.0
    n_cls: int | None = None  # normalizers; default to the term counts
    n_reg: int | None = None


def detection_loss(batch: DetectionLossBatch) -> tuple[float, np.ndarray, np.ndarray]:
    """Joint objective: mean classification loss plus weighted mean regression loss.

    Returns (value, grad_cls_logits, grad_reg_pred).  With no positives the
    regression term is zero.
    """
    cls_logits = np.asarray(batch.cls_logits, dtype=np.float64)
    cls_labels = np.asarray(batch.cls_labels, dtype=np.int64)
    reg_pred = np.asarray(batch.reg_pred, dtype=np.float64).reshape(-1, 2) if np.size(batch.reg_pred) else np.zeros((0, 2))
    reg_target = np.asarray(batch.reg_target, dtype=np.float64).reshape(-1, 2) if np.size(batch.reg_target) else np.zeros((0, 2))
    if reg_pred.shape != reg_target.shape:
        raise ShapeError(f"regression shapes differ: {reg_pred.shape} vs {reg_target.shape}")
    n_cls = batch.n_cls if batch.n_cls is not None else max(1, cls_logits.shape[0])
    n_reg = batch.n_reg if batch.n_reg is not None else max(1, reg_pred.shape[0])

    if cls_logits.shape[0]:
        ce_mean, ce_grad = softmax_cross_entropy(cls_logits, cls_labels)
        # softmax_cross_entropy averages over its batch; rescale to 1/n_cls
        cls_value = ce_mean * cls_logits.shape[0] / n_cls
        grad_cls = ce_grad * cls_logits.shape[0] / n_cls
    else:
        cls_value, grad_cls = 0.0, np.zeros_like(cls_logits)

    if reg_pred.shape[0]:
        reg_sum, reg_grad = smooth_l1(reg_pred, reg_target)
        reg_value = batch.lam * reg_sum / n_reg
        grad_reg = batch.lam * reg_grad / n_reg
    else:
        reg_value, grad_reg = 0.0, np.zeros_like(reg_pred)

    return cls_value + reg_value, grad_cls, grad_reg
