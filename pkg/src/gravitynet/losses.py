"""The multi-task gravity loss: focal classification over all gravity points
plus smooth-L1 offset regression over the hooked ones.

All functions accept torch tensors or anything torch.as_tensor understands and
are differentiable, so analytic gradients come straight from autograd.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import InvalidInputError

SCORE_EPS = 1e-6


@dataclass(frozen=True)
class LossConfig:
    """lam balances the two task losses; alpha and phi are the focal parameters."""

    lam: float = 10.0
    alpha: float = 0.25
    phi: float = 2.0

    def __post_init__(self):
        if self.lam < 0:
            raise InvalidInputError(f"lam must be >= 0, got {self.lam}")
        if not 0 < self.alpha < 1:
            raise InvalidInputError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.phi < 0:
            raise InvalidInputError(f"phi must be >= 0, got {self.phi}")


def smooth_l1(t):
    """0.5*t^2 below |t| = 1, |t| - 0.5 above; both branches meet at 0.5."""
    t = torch.as_tensor(t)
    a = t.abs()
    return torch.where(a < 1, 0.5 * t * t, a - 0.5)


def _focal_terms(p_true, positive, alpha, phi):
    # p_true: probability assigned to the true class, already clamped
    alpha_t = torch.where(positive, p_true.new_tensor(alpha), p_true.new_tensor(1.0 - alpha))
    return -alpha_t * (1.0 - p_true) ** phi * torch.log(p_true)


def classification_loss(scores, labels, config: LossConfig = LossConfig()):
    """Focal loss summed over every gravity point, normalized by the positive count.

    scores are lesion probabilities; the probability of the true class is the
    score for positives and its complement for negatives. Scores are clamped
    away from {0, 1} before the log.
    """
    scores = torch.as_tensor(scores, dtype=torch.get_default_dtype()) if not torch.is_tensor(scores) else scores
    labels = torch.as_tensor(labels, dtype=torch.bool)
    if scores.shape != labels.shape:
        raise InvalidInputError(f"scores shape {tuple(scores.shape)} != labels shape {tuple(labels.shape)}")
    s = scores.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
    p_true = torch.where(labels, s, 1.0 - s)
    total = _focal_terms(p_true, labels, config.alpha, config.phi).sum()
    return total / max(1, int(labels.sum()))


def channel_classification_loss(class_probs, labels, config: LossConfig = LossConfig()):
    """Focal loss over the (background, lesion) sigmoid pair of every gravity point.

    Each channel carries an independent one-hot target: a positive point is
    (0, 1), a negative (1, 0), and both channels contribute a focal term.
    This is the form the two-channel classification head trains with; the sum
    is normalized by the positive count like classification_loss.
    """
    class_probs = torch.as_tensor(class_probs)
    labels = torch.as_tensor(labels, dtype=torch.bool)
    if class_probs.shape != labels.shape + (2,):
        raise InvalidInputError(
            f"class probs shape {tuple(class_probs.shape)} is not labels shape + (2,)"
        )
    s = class_probs.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
    target = torch.stack([~labels, labels], dim=-1)
    p_true = torch.where(target, s, 1.0 - s)
    total = _focal_terms(p_true, target, config.alpha, config.phi).sum()
    return total / max(1, int(labels.sum()))


def regression_loss(offsets, targets, labels):
    """Smooth-L1 distance between predicted and target offsets of hooked points,
    normalized by the hooked count; zero when nothing is hooked."""
    offsets = torch.as_tensor(offsets, dtype=torch.get_default_dtype()) if not torch.is_tensor(offsets) else offsets
    targets = torch.as_tensor(targets, dtype=offsets.dtype)
    labels = torch.as_tensor(labels, dtype=torch.bool)
    if offsets.shape != targets.shape or offsets.shape[:-1] != labels.shape or offsets.shape[-1] != 2:
        raise InvalidInputError(
            f"offset shape {tuple(offsets.shape)}, target shape {tuple(targets.shape)} and "
            f"labels shape {tuple(labels.shape)} are inconsistent"
        )
    n_hooked = int(labels.sum())
    if n_hooked == 0:
        return (offsets * 0.0).sum()
    total = smooth_l1(targets[labels] - offsets[labels]).sum()
    return total / n_hooked


def gravity_loss(scores, offsets, assignment, config: LossConfig = LossConfig()):
    """Total loss = classification + lam * regression. Returns (total, cls, reg)."""
    cls = classification_loss(scores, assignment.labels, config)
    reg = regression_loss(offsets, assignment.target_offsets, assignment.labels)
    return cls + config.lam * reg, cls, reg
