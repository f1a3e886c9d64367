"""Classification, heatmap-alignment and composite losses.

All three accept a single sample or a leading batch axis; batched inputs are
reduced by the mean over the batch.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import InvalidInputError

PROB_EPS = 1e-7
NORM_TOL = 1e-5


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1.0
    class_count: int = 2

    def __post_init__(self):
        if self.lam < 0:
            raise InvalidInputError(f"lambda must be non-negative, got {self.lam}")


def _tensor(x, like=None):
    if torch.is_tensor(x):
        return x
    dtype = like.dtype if like is not None else torch.float64
    return torch.as_tensor(x, dtype=dtype)


def one_hot(labels, class_count: int = 2, dtype=torch.float32) -> torch.Tensor:
    return torch.nn.functional.one_hot(torch.as_tensor(labels, dtype=torch.long), class_count).to(dtype)


def classification_loss(probs, onehot) -> torch.Tensor:
    """Cross-entropy ``-sum_c y_c log p_c`` with probabilities clamped to ``[1e-7, 1]``."""
    probs = _tensor(probs)
    onehot = _tensor(onehot, probs)
    if probs.shape != onehot.shape:
        raise InvalidInputError(f"probabilities {tuple(probs.shape)} and targets {tuple(onehot.shape)} differ")
    total = probs.detach().sum(dim=-1)
    if torch.any((total - 1).abs() > NORM_TOL):
        raise InvalidInputError("probabilities do not sum to 1")
    per_sample = -(onehot * torch.log(probs.clamp(PROB_EPS, 1.0))).sum(dim=-1)
    return per_sample.mean() if per_sample.ndim else per_sample


def xai_loss(h, m) -> torch.Tensor:
    """Mean squared difference between a heatmap and a binary mask over all voxels."""
    h = _tensor(h)
    m = _tensor(m, h).to(h.dtype)
    if h.shape != m.shape:
        raise InvalidInputError(f"heatmap {tuple(h.shape)} and mask {tuple(m.shape)} differ in shape")
    return ((m - h) ** 2).mean()


def xai_loss_batch(h: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Per-sample voxel mean, then batch mean; equals ``xai_loss`` for equal-sized samples."""
    if h.shape != m.shape:
        raise InvalidInputError(f"heatmap {tuple(h.shape)} and mask {tuple(m.shape)} differ in shape")
    return ((m.to(h.dtype) - h) ** 2).flatten(1).mean(dim=1).mean()


def composite_loss(cls, xai, cfg: LossConfig):
    if cfg.lam == 0:
        return cls
    return cls + cfg.lam * xai
