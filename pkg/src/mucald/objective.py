"""The composite training objective and its warm-up/ramp-up schedule.

Total = seg + proxy(split1 + split2) + diff(split1 + split2) + KL(exo)
+ KL(causal) + adversarial(split1 + split2), each group carrying its own
weight. The first local epochs of every round train segmentation only;
the proxy and adversarial weights then ramp linearly to their base
values while the diffusion and KL weights switch on at full strength.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .exceptions import ConfigError, DataError, ShapeMismatchError

DICE_EPS = 1e-6


@dataclass(frozen=True)
class LossWeights:
    lambda_seg: float = 1.0
    lambda_proxy: float = 0.1
    lambda_diff: float = 0.1
    lambda_klu: float = 0.01
    lambda_klz: float = 0.01
    lambda_adv: float = 0.1

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not np.isfinite(value) or value < 0:
                raise ConfigError(f"loss weight {name} must be finite and >= 0, got {value}")


@dataclass
class ScheduleState:
    """Position inside a round's local epochs (1-based)."""

    round_index: int = 1
    epoch: int = 1
    warmup_epochs: int = 2
    rampup_epochs: int = 3


def ramp_factor(schedule):
    """0 during warm-up, e/R through the ramp, 1 afterwards."""
    past_warmup = schedule.epoch - schedule.warmup_epochs
    if past_warmup <= 0:
        return 0.0
    if past_warmup >= schedule.rampup_epochs:
        return 1.0
    return past_warmup / schedule.rampup_epochs


def effective_weights(schedule, base):
    """Scheduled weights: warm-up is segmentation-only; the proxy and
    adversarial weights ramp linearly; diffusion and KL weights are full
    immediately after warm-up."""
    if schedule.epoch <= schedule.warmup_epochs:
        return LossWeights(lambda_seg=base.lambda_seg, lambda_proxy=0.0, lambda_diff=0.0,
                           lambda_klu=0.0, lambda_klz=0.0, lambda_adv=0.0)
    factor = ramp_factor(schedule)
    return replace(base,
                   lambda_proxy=base.lambda_proxy * factor,
                   lambda_adv=base.lambda_adv * factor)


def soft_dice_loss(probs, target, return_grad=False):
    """1 - mean over classes of (2*sum(p*g) + eps) / (sum(p) + sum(g) + eps).

    ``probs`` is channel-normalized [batch, C, H, W]; ``target`` holds
    integer class ids. Sums run over the whole batch per class.
    """
    probs = np.asarray(probs, dtype=np.float64)
    target = np.asarray(target)
    if probs.shape[0] != target.shape[0] or probs.shape[2:] != target.shape[1:]:
        raise ShapeMismatchError(f"soft_dice_loss: probs shape {probs.shape} does not match "
                                 f"target shape {target.shape}")
    n_classes = probs.shape[1]
    if target.min() < 0 or target.max() >= n_classes:
        raise DataError(f"soft_dice_loss: class id {int(target.max())} outside [0, {n_classes})")
    classes = np.arange(n_classes)[None, :, None, None]
    onehot = (target[:, None, :, :] == classes).astype(np.float64)

    inter = (probs * onehot).sum(axis=(0, 2, 3))
    p_sum = probs.sum(axis=(0, 2, 3))
    g_sum = onehot.sum(axis=(0, 2, 3))
    num = 2.0 * inter + DICE_EPS
    den = p_sum + g_sum + DICE_EPS
    loss = 1.0 - float((num / den).mean())
    if not return_grad:
        return loss
    # d loss / d p_c = -(1/C) * (2 g - num/den) / den, per class
    scale = -1.0 / n_classes
    grad = scale * (2.0 * onehot - (num / den)[None, :, None, None]) / den[None, :, None, None]
    return loss, grad


def proxy_loss(proxy_pred, proxy_true):
    """Plain MSE over aligned proxy vectors (no masking)."""
    proxy_pred = np.asarray(proxy_pred, dtype=np.float64)
    proxy_true = np.asarray(proxy_true, dtype=np.float64)
    if proxy_pred.shape != proxy_true.shape:
        raise ShapeMismatchError(f"proxy_loss: prediction shape {proxy_pred.shape} does not "
                                 f"match target shape {proxy_true.shape}")
    return float(((proxy_pred - proxy_true) ** 2).mean())


@dataclass
class LossBreakdown:
    seg: float = 0.0
    proxy1: float = 0.0
    proxy2: float = 0.0
    diff1: float = 0.0
    diff2: float = 0.0
    klu: float = 0.0
    klz: float = 0.0
    adv1: float = 0.0
    adv2: float = 0.0
    total: float = 0.0

    FIELDS = ("seg", "proxy1", "proxy2", "diff1", "diff2", "klu", "klz", "adv1", "adv2", "total")

    def as_row(self):
        return [getattr(self, f) for f in self.FIELDS]


def total_loss(seg, proxy1, proxy2, diff1, diff2, klu, klz, adv1, adv2, weights):
    """Exact weighted sum of the six loss groups."""
    components = dict(seg=seg, proxy1=proxy1, proxy2=proxy2, diff1=diff1, diff2=diff2,
                      klu=klu, klz=klz, adv1=adv1, adv2=adv2)
    for name, value in components.items():
        if not np.isfinite(value):
            raise DataError(f"total_loss: component {name} is non-finite ({value})")
    total = (weights.lambda_seg * seg
             + weights.lambda_proxy * (proxy1 + proxy2)
             + weights.lambda_diff * (diff1 + diff2)
             + weights.lambda_klu * klu
             + weights.lambda_klz * klz
             + weights.lambda_adv * (adv1 + adv2))
    return LossBreakdown(total=float(total), **components)


def mean_breakdown(breakdowns):
    """Field-wise average of a list of LossBreakdowns."""
    if not breakdowns:
        return LossBreakdown()
    values = {f: float(np.mean([getattr(b, f) for b in breakdowns]))
              for f in LossBreakdown.FIELDS}
    return LossBreakdown(**values)
