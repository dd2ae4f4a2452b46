"""Training objective: two-sided cross entropy plus soft Dice.

Inputs are probability tensors (already softmaxed), shaped either
(C, X, Y, Z) or (B, C, X, Y, Z), with one-hot targets of the same shape.

The CE term penalizes both the true-class log prob and the complement of
every wrong-class prob:

    ce = -(1/V) * sum_c sum_v [ g log p + (1 - g) log(1 - p) ]

with V the number of voxels (batch included) and log arguments clamped to
[eps, 1 - eps]. The Dice term uses squared-sum denominators per class:

    t_c = (2 sum gp + eps) / (sum g^2 + sum p^2 + eps)

reduced either as 1 - sum_c t_c ("sum", the form matching an 8-class
optimum of -7) or 1 - mean_c t_c ("mean", bounded in [0, 1]). Optional
per-class weights multiply both terms' class contributions.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .volume import NUM_CLASSES


@dataclass
class LossConfig:
    epsilon: float = 1e-5
    dice_reduction: str = "sum"  # "sum" or "mean"
    class_weights: tuple | None = None  # length C, defaults to all ones

    def __post_init__(self):
        if self.dice_reduction not in ("sum", "mean"):
            raise ValueError(f"dice_reduction must be sum or mean, got {self.dice_reduction!r}")
        if not (0 < self.epsilon < 0.5):
            raise ValueError(f"epsilon out of range: {self.epsilon}")
        if self.class_weights is not None:
            self.class_weights = tuple(float(w) for w in self.class_weights)
            if any(w < 0 for w in self.class_weights):
                raise ValueError("class weights must be nonnegative")


def _flatten(probs: torch.Tensor, target: torch.Tensor):
    """Both tensors as (C, V) regardless of batching."""
    if probs.shape != target.shape:
        raise ValueError(f"probs {tuple(probs.shape)} vs target {tuple(target.shape)}")
    if probs.dim() == 4:
        c = probs.shape[0]
        return probs.reshape(c, -1), target.reshape(c, -1)
    if probs.dim() == 5:
        c = probs.shape[1]
        p = probs.movedim(1, 0).reshape(c, -1)
        t = target.movedim(1, 0).reshape(c, -1)
        return p, t
    raise ValueError(f"expected 4D or 5D tensors, got {probs.dim()}D")


def _weights(cfg: LossConfig, c: int, like: torch.Tensor) -> torch.Tensor:
    if cfg.class_weights is None:
        return torch.ones(c, dtype=like.dtype, device=like.device)
    if len(cfg.class_weights) != c:
        raise ValueError(
            f"{len(cfg.class_weights)} class weights for {c} classes"
        )
    return torch.tensor(cfg.class_weights, dtype=like.dtype, device=like.device)


def ce_loss(probs: torch.Tensor, target: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    p, g = _flatten(probs, target)
    c, v = p.shape
    p = p.clamp(cfg.epsilon, 1.0 - cfg.epsilon)
    per_class = -(g * torch.log(p) + (1.0 - g) * torch.log1p(-p)).sum(dim=1)
    w = _weights(cfg, c, p)
    return (w * per_class).sum() / v


def dice_loss(probs: torch.Tensor, target: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    p, g = _flatten(probs, target)
    c, _ = p.shape
    inter = (g * p).sum(dim=1)
    denom = (g * g).sum(dim=1) + (p * p).sum(dim=1)
    t = (2.0 * inter + cfg.epsilon) / (denom + cfg.epsilon)
    w = _weights(cfg, c, p)
    if cfg.dice_reduction == "sum":
        return 1.0 - (w * t).sum()
    return 1.0 - (w * t).sum() / w.sum()


def total_loss(probs: torch.Tensor, target: torch.Tensor, cfg: LossConfig = LossConfig()) -> torch.Tensor:
    return ce_loss(probs, target, cfg) + dice_loss(probs, target, cfg)


def uniform_ce_value(num_classes: int = NUM_CLASSES, epsilon: float = 1e-5) -> float:
    """Closed-form CE at uniform probability 1/C: reference for tests."""
    import math

    p = 1.0 / num_classes
    p = min(max(p, epsilon), 1.0 - epsilon)
    return -(math.log(p) + (num_classes - 1) * math.log1p(-p))
