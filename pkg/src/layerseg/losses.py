"""Dice loss, soft-label targets and the weighted focal MSE."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .core_types import ShapeError, ValidationError

DICE_EPS = 1e-6


@dataclass(frozen=True)
class WfmseParams:
    e_correct: float = 1.0
    e_incorrect: float = 8.0
    beta: float = 20.0
    gamma: float = 1.0

    def __post_init__(self):
        if self.e_correct <= 0 or self.e_incorrect <= 0:
            raise ValidationError("error weights must be positive")
        if self.beta <= 0:
            raise ValidationError("beta must be positive")
        if self.gamma < 0:
            raise ValidationError("gamma must be non-negative")


def _check_pair(probs: torch.Tensor, gt: torch.Tensor) -> None:
    if probs.dim() != gt.dim() + 1 or probs.shape[:1] + probs.shape[2:] != gt.shape:
        raise ShapeError(f"probabilities {tuple(probs.shape)} do not match labels {tuple(gt.shape)}")


def dice_loss(probs: torch.Tensor, gt: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """Class-averaged soft Dice loss with squared denominators.

    probs: B x C x H x W probabilities; gt: B x H x W labels. Sums run over all
    pixels of the batch. ``eps`` is added to numerator and denominator per class,
    so a class absent from both prediction and ground truth scores 1.
    """
    _check_pair(probs, gt)
    num_classes = probs.shape[1]
    g = F.one_hot(gt.long(), num_classes).movedim(-1, 1).to(probs.dtype)
    dims = [d for d in range(probs.dim()) if d != 1]
    inter = (probs * g).sum(dims)
    denom = (probs * probs).sum(dims) + (g * g).sum(dims)
    dice = (2 * inter + eps) / (denom + eps)
    return 1 - dice.mean()


def soft_label_targets(probs: torch.Tensor, pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """P(true class) where the prediction is right, -(1 - P(true class)) where wrong."""
    _check_pair(probs, gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} and labels {tuple(gt.shape)} differ")
    p_true = probs.gather(1, gt.long().unsqueeze(1)).squeeze(1)
    return torch.where(pred == gt, p_true, p_true - 1)


def error_weights(pred: torch.Tensor, gt: torch.Tensor, params: WfmseParams = WfmseParams()) -> torch.Tensor:
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} and labels {tuple(gt.shape)} differ")
    correct = torch.tensor(params.e_correct, dtype=torch.get_default_dtype())
    wrong = torch.tensor(params.e_incorrect, dtype=torch.get_default_dtype())
    return torch.where(pred == gt, correct, wrong)


def wfmse_loss(u: torch.Tensor, u_hat: torch.Tensor, weights: torch.Tensor | None = None,
               params: WfmseParams = WfmseParams()) -> torch.Tensor:
    """Mean of e * (u - u_hat)^2 * (2 sigmoid(beta |u - u_hat|) - 1)^gamma."""
    if u.shape != u_hat.shape or (weights is not None and weights.shape != u.shape):
        raise ShapeError("soft labels, predictions and weights must share a shape")
    diff = u - u_hat
    ae = diff.abs()
    # 2 sigmoid(x) - 1 == tanh(x / 2); clamped so 0 ** gamma keeps a finite gradient
    focal = torch.tanh(0.5 * params.beta * ae).clamp_min(torch.finfo(ae.dtype).tiny) ** params.gamma
    loss = diff * diff * focal
    if weights is not None:
        loss = loss * weights.to(loss.dtype)
    return loss.mean()
