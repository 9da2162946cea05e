"""Classification and box-regression losses with closed-form gradients.

Labels use the ``y in {+1, -1}`` convention. ``p`` is always the
probability of the ``y = +1`` outcome.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from mcpad.geometry import IGNORE, POSITIVE, AnchorAssignment

EPS = 1e-7
DEFAULT_BETA = 1.0 / 9.0


@dataclass(frozen=True)
class FocalConfig:
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")


def _check_label(y) -> None:
    if np.any((np.asarray(y) != 1) & (np.asarray(y) != -1)):
        raise ValueError("labels must be +1 or -1")


def p_t(p, y):
    """Probability assigned to the true outcome."""
    _check_label(y)
    return np.where(np.asarray(y) == 1, p, 1 - np.asarray(p))


def alpha_t(y, alpha: float):
    return np.where(np.asarray(y) == 1, alpha, 1 - alpha)


def cross_entropy(p, y):
    pt = np.clip(p_t(p, y), EPS, 1 - EPS)
    return -np.log(pt)


def focal_loss(p, y, cfg: FocalConfig = FocalConfig(), alpha_t_override=None):
    """``-alpha_t * (1 - p_t)**gamma * log(p_t)`` on clamped probabilities.

    ``alpha_t_override`` fixes ``alpha_t`` for both labels, e.g. ``1.0`` to
    switch the balancing off.
    """
    pt = np.clip(p_t(p, y), EPS, 1 - EPS)
    at = alpha_t(y, cfg.alpha) if alpha_t_override is None else alpha_t_override
    return -at * (1 - pt) ** cfg.gamma * np.log(pt)


def _log_sigmoid(z):
    # log(1 / (1 + exp(-z))) without overflow
    z = np.asarray(z, dtype=np.float64)
    return np.minimum(z, 0) - np.log1p(np.exp(-np.abs(z)))


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + ez), ez / (1 + ez))


def focal_loss_logit(z, y, cfg: FocalConfig = FocalConfig()):
    """Focal loss as a function of the logit, stable for any ``z``.

    Used in training; agrees with :func:`focal_loss` wherever the
    probability clamp is inactive.
    """
    _check_label(y)
    yz = np.asarray(y) * np.asarray(z, dtype=np.float64)
    pt = sigmoid(yz)
    return -alpha_t(y, cfg.alpha) * (1 - pt) ** cfg.gamma * _log_sigmoid(yz)


def focal_loss_grad(z, y, cfg: FocalConfig = FocalConfig()):
    """d focal_loss_logit / dz.

    With ``p_t = sigmoid(y z)``, ``dp_t/dz = y p_t (1 - p_t)``, which gives
    ``y alpha_t [gamma (1-p_t)^gamma p_t log p_t - (1-p_t)^(gamma+1)]``.
    """
    _check_label(y)
    y = np.asarray(y)
    yz = y * np.asarray(z, dtype=np.float64)
    pt = sigmoid(yz)
    q = sigmoid(-yz)  # 1 - p_t, accurate when p_t is near 1
    log_pt = _log_sigmoid(yz)
    g = cfg.gamma
    if g == 0:
        inner = -q
    else:
        inner = g * q**g * pt * log_pt - q ** (g + 1)
    return y * alpha_t(y, cfg.alpha) * inner


def smooth_l1(pred, target, beta: float = DEFAULT_BETA):
    """Huber-style loss summed over the last axis."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    d = np.abs(np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64))
    per = np.where(d < beta, 0.5 * d * d / beta, d - 0.5 * beta)
    return per.sum(axis=-1)


def smooth_l1_grad(pred, target, beta: float = DEFAULT_BETA):
    """Gradient of :func:`smooth_l1` with respect to ``pred``."""
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return np.where(np.abs(d) < beta, d / beta, np.sign(d))


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    cls_part: float
    reg_part: float


def class_targets(assign: AnchorAssignment, num_classes: int = 2) -> np.ndarray:
    """One-vs-all ``{+1, -1}`` targets, shape ``(N, num_classes)``."""
    y = -np.ones((len(assign.labels), num_classes), dtype=np.int64)
    pos = np.flatnonzero(assign.labels == POSITIVE)
    y[pos, assign.classes[pos]] = 1
    return y


def batch_detector_loss(
    assign: AnchorAssignment,
    cls_logits: np.ndarray,
    box_deltas: np.ndarray,
    reg_targets: np.ndarray,
    cfg: FocalConfig = FocalConfig(),
    beta: float = DEFAULT_BETA,
) -> LossBreakdown:
    """Focal classification plus smooth-L1 regression, both divided by the positive count.

    Args:
        assign: Per-anchor labels from :func:`mcpad.geometry.assign_anchors`.
        cls_logits: ``(N, C)`` logits, one independent sigmoid per class.
        box_deltas: ``(N, 4)`` predicted deltas.
        reg_targets: ``(N, 4)`` encoded ground truth; read only at positives.
    """
    total, cls_part, reg_part, _, _ = detector_loss_and_grads(assign, cls_logits, box_deltas, reg_targets, cfg, beta)
    return LossBreakdown(total, cls_part, reg_part)


def detector_loss_and_grads(assign, cls_logits, box_deltas, reg_targets, cfg=FocalConfig(), beta=DEFAULT_BETA):
    """Loss parts and gradients w.r.t. ``cls_logits`` and ``box_deltas``."""
    cls_logits = np.asarray(cls_logits, dtype=np.float64)
    box_deltas = np.asarray(box_deltas, dtype=np.float64)
    keep = assign.labels != IGNORE
    pos = assign.labels == POSITIVE
    norm = max(1, int(pos.sum()))

    y = class_targets(assign, cls_logits.shape[1])
    cls_loss = focal_loss_logit(cls_logits, y, cfg) * keep[:, None]
    cls_grad = focal_loss_grad(cls_logits, y, cfg) * keep[:, None] / norm
    cls_part = math.fsum(cls_loss.ravel()) / norm

    reg_grad = np.zeros_like(box_deltas)
    if pos.any():
        reg_part = math.fsum(smooth_l1(box_deltas[pos], reg_targets[pos], beta)) / norm
        reg_grad[pos] = smooth_l1_grad(box_deltas[pos], reg_targets[pos], beta) / norm
    else:
        reg_part = 0.0
    return cls_part + reg_part, cls_part, reg_part, cls_grad, reg_grad
