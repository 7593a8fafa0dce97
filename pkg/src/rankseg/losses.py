"""Dice loss, uncertainty-squeezing consistency loss, and their weighted sum."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from rankseg.errors import ConfigError, DimensionError, ValidationError
from rankseg.ndarr import Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    dice_smooth: float = 1.0
    squeeze_eps: float = 1e-6
    # detach the perturbed predictions inside the squeeze term
    stop_grad_perturbed: bool = False
    # average the Dice term over the background channel as well
    dice_include_background: bool = False
    # noise draws per training step for the squeeze term; None uses all N.
    # Fewer draws are rescaled by N / draws, an unbiased estimate of the sum.
    squeeze_draws: Optional[int] = None

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError(f"alpha must be non-negative, got {self.alpha}")
        if self.dice_smooth <= 0 or self.squeeze_eps <= 0:
            raise ConfigError("dice_smooth and squeeze_eps must be positive")
        if self.squeeze_draws is not None and self.squeeze_draws < 1:
            raise ConfigError("squeeze_draws must be >= 1")


def one_hot(labels: np.ndarray, n_channels: int, dtype=np.float32) -> np.ndarray:
    """``[B, H, W]`` integer labels to ``[B, n_channels, H, W]``."""
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= n_channels:
        raise ValidationError(f"labels must lie in [0, {n_channels - 1}]")
    return (labels[:, None] == np.arange(n_channels)[None, :, None, None]).astype(dtype)


def dice_loss(probs: Tensor, target, smooth: float = 1.0, include_background: bool = False) -> Tensor:
    """``1 - mean_c (2 sum(p t) + s) / (sum(p) + sum(t) + s)``.

    Sums run over the batch and all pixels of each channel. The mean runs over
    the foreground channels ``1..C`` (channel 0 is background) unless
    ``include_background`` is set. Including background lets the loss settle
    on an all-background prediction for small structures.
    """
    t = np.asarray(target.data if isinstance(target, Tensor) else target)
    if t.shape != probs.shape:
        raise DimensionError(f"dice_loss: target {t.shape} vs probs {probs.shape}")
    if not (np.isin(t, (0, 1)).all() and np.all(t.sum(axis=1) == 1)):
        raise ValidationError("dice_loss target must be one-hot along the channel axis")
    t = Tensor(t, dtype=probs.dtype)
    axes = (0, 2, 3)
    inter = (probs * t).sum(axis=axes)
    denom = probs.sum(axis=axes) + t.sum(axis=axes) + smooth
    per_class = (inter * 2.0 + smooth) / denom
    if not include_background:
        per_class = per_class[1:]
    return 1.0 - per_class.mean()


def squeeze_loss(p_clean: Tensor, p_perturbed: Sequence[Tensor], omega, eps: float = 1e-6,
                 stop_grad_perturbed: bool = False) -> Tensor:
    """Masked squared disagreement between clean and perturbed predictions.

    For each sample ``b``: ``sum_n ||(P - P_n) * omega_b||^2 / (|omega_b| + eps)``,
    where the mask ``omega`` (``[H, W]`` or ``[B, H, W]``) is broadcast over
    channels and ``|omega_b|`` counts pixels. The result is the batch mean.
    """
    if len(p_perturbed) == 0:
        logger.warning("squeeze_loss called with no perturbed predictions; returning 0")
        return Tensor(0.0, dtype=p_clean.dtype)
    omega = np.asarray(omega)
    if omega.ndim == 2:
        omega = omega[None]
    B = p_clean.shape[0]
    if omega.shape[1:] != p_clean.shape[2:] or omega.shape[0] not in (1, B):
        raise DimensionError(f"omega {omega.shape} does not broadcast against predictions {p_clean.shape}")
    mask = np.broadcast_to(omega, (B,) + omega.shape[1:]).astype(p_clean.dtype)
    norm = 1.0 / (mask.sum(axis=(1, 2)) + eps)
    mask4 = Tensor(mask[:, None], dtype=p_clean.dtype)
    total = None
    for p in p_perturbed:
        if p.shape != p_clean.shape:
            raise DimensionError(f"perturbed prediction {p.shape} vs clean {p_clean.shape}")
        if stop_grad_perturbed:
            p = p.detach()
        term = (((p_clean - p) * mask4) ** 2).sum(axis=(1, 2, 3))
        total = term if total is None else total + term
    return (total * Tensor(norm, dtype=p_clean.dtype)).mean()


def total_loss(dice: Tensor, squeeze: Tensor, alpha: float) -> Tensor:
    return dice + squeeze * alpha
