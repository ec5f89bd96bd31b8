"""Segmentation and reconstruction quality metrics.

Conventions, stated so the brute-force oracles can agree bit-for-bit:

* Background is class 0 everywhere. "IoU W/B" averages over all classes,
  "IoU N/B" over classes 1..C-1. Undefined per-class ratios (0/0) count
  as 0 and are flagged.
* Boundaries are 4-connectivity boundary pixel sets; surface distances
  are Euclidean in pixel units. HD95 is the 95th percentile (linear
  interpolation between order statistics) of the pooled directed
  nearest-neighbour distances in both directions; ASSD is their mean.
* PSNR is 10*log10(peak^2 / MSE), capped at 100 dB, with peak defaulting
  to the observed dynamic range of the reference, floored at 1e-6.
* SSIM uses a 7x7 uniform window over valid positions (one global window
  for smaller inputs), K1=0.01, K2=0.03.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .exceptions import DataError, ShapeMismatchError

PSNR_CAP = 100.0
SSIM_WINDOW = 7
SSIM_K1 = 0.01
SSIM_K2 = 0.03


# ----------------- overlap metrics -----------------

@dataclass
class ConfusionScores:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    per_class_dice: np.ndarray
    per_class_iou: np.ndarray
    per_class_precision: np.ndarray
    per_class_recall: np.ndarray
    per_class_f1: np.ndarray
    dice: float
    iou_wb: float
    iou_nb: float
    precision: float
    recall: float
    f1: float
    undefined: dict = field(default_factory=dict)  # metric -> list of flagged classes


def _safe_ratio(num, den, flags, metric):
    out = np.zeros_like(num, dtype=np.float64)
    defined = den > 0
    out[defined] = num[defined] / den[defined]
    bad = np.flatnonzero(~defined)
    if bad.size:
        flags[metric] = bad.tolist()
    return out


def confusion_scores(pred, truth, num_classes):
    """Per-class TP/FP/FN with the derived overlap scores."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeMismatchError(f"confusion_scores: pred shape {pred.shape} does not match "
                                 f"truth shape {truth.shape}")
    if pred.min() < 0 or truth.min() < 0 or pred.max() >= num_classes or truth.max() >= num_classes:
        raise DataError(f"confusion_scores: class ids outside [0, {num_classes})")
    tp = np.zeros(num_classes)
    fp = np.zeros(num_classes)
    fn = np.zeros(num_classes)
    for c in range(num_classes):
        p = pred == c
        t = truth == c
        tp[c] = np.count_nonzero(p & t)
        fp[c] = np.count_nonzero(p & ~t)
        fn[c] = np.count_nonzero(~p & t)

    flags = {}
    dice_c = _safe_ratio(2 * tp, 2 * tp + fp + fn, flags, "dice")
    iou_c = _safe_ratio(tp, tp + fp + fn, flags, "iou")
    prec_c = _safe_ratio(tp, tp + fp, flags, "precision")
    rec_c = _safe_ratio(tp, tp + fn, flags, "recall")
    f1_den = prec_c + rec_c
    f1_c = np.zeros(num_classes)
    np.divide(2 * prec_c * rec_c, f1_den, out=f1_c, where=f1_den > 0)

    iou_nb = float(iou_c[1:].mean()) if num_classes > 1 else 0.0
    if num_classes == 1:
        flags.setdefault("iou_nb", []).append(0)
    return ConfusionScores(
        tp=tp, fp=fp, fn=fn,
        per_class_dice=dice_c, per_class_iou=iou_c, per_class_precision=prec_c,
        per_class_recall=rec_c, per_class_f1=f1_c,
        dice=float(dice_c.mean()), iou_wb=float(iou_c.mean()), iou_nb=iou_nb,
        precision=float(prec_c.mean()), recall=float(rec_c.mean()), f1=float(f1_c.mean()),
        undefined=flags,
    )


# ----------------- surface distances -----------------

def boundary_points(region):
    """4-connectivity boundary pixels of a binary region as an [n, 2] array.

    A region pixel is boundary if any 4-neighbour is outside the region
    or outside the image.
    """
    region = np.asarray(region, dtype=bool)
    if not region.any():
        return np.zeros((0, 2), dtype=np.int64)
    padded = np.pad(region, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    boundary = region & ~interior
    return np.argwhere(boundary)


def _pooled_surface_distances(a_points, b_points):
    tree_a = cKDTree(a_points)
    tree_b = cKDTree(b_points)
    d_ab, _ = tree_b.query(a_points)
    d_ba, _ = tree_a.query(b_points)
    return np.concatenate([np.atleast_1d(d_ab), np.atleast_1d(d_ba)])


def hd95(pred_boundary, truth_boundary, empty_distance=None):
    """95th percentile of pooled directed nearest-neighbour distances."""
    pred_boundary = np.asarray(pred_boundary).reshape(-1, 2)
    truth_boundary = np.asarray(truth_boundary).reshape(-1, 2)
    if len(pred_boundary) == 0 and len(truth_boundary) == 0:
        return 0.0
    if len(pred_boundary) == 0 or len(truth_boundary) == 0:
        if empty_distance is None:
            raise DataError("hd95: one boundary empty and no sentinel distance given")
        return float(empty_distance)
    return float(np.percentile(_pooled_surface_distances(pred_boundary, truth_boundary), 95))


def assd(pred_boundary, truth_boundary, empty_distance=None):
    """Mean of pooled directed nearest-neighbour distances in both directions."""
    pred_boundary = np.asarray(pred_boundary).reshape(-1, 2)
    truth_boundary = np.asarray(truth_boundary).reshape(-1, 2)
    if len(pred_boundary) == 0 and len(truth_boundary) == 0:
        return 0.0
    if len(pred_boundary) == 0 or len(truth_boundary) == 0:
        if empty_distance is None:
            raise DataError("assd: one boundary empty and no sentinel distance given")
        return float(empty_distance)
    return float(_pooled_surface_distances(pred_boundary, truth_boundary).mean())


# ----------------- reconstruction metrics -----------------

def mse(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeMismatchError(f"mse: shapes {x.shape} and {y.shape} differ")
    return float(((x - y) ** 2).mean())


def psnr(x, y, peak=None):
    """10*log10(peak^2 / MSE) in dB, capped at 100; ``peak`` defaults to
    the observed dynamic range of ``x`` floored at 1e-6."""
    err = mse(x, y)
    if peak is None:
        peak = max(float(np.max(x) - np.min(x)), 1e-6)
    if peak <= 0:
        raise DataError(f"psnr: peak must be > 0, got {peak}")
    if err == 0.0:
        return PSNR_CAP
    return float(min(10.0 * np.log10(peak * peak / err), PSNR_CAP))


def _box_sums(img, k):
    """Sum over every valid k x k window via an integral image."""
    csum = np.cumsum(np.cumsum(img, axis=0), axis=1)
    csum = np.pad(csum, ((1, 0), (1, 0)))
    return (csum[k:, k:] - csum[:-k, k:] - csum[k:, :-k] + csum[:-k, :-k])


def ssim(x, y, data_range=None, window=SSIM_WINDOW):
    """Uniform-window SSIM averaged over valid window positions.

    2-D inputs only at this level; see :func:`ssim_multichannel`. Inputs
    smaller than the window fall back to one global window.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeMismatchError(f"ssim: shapes {x.shape} and {y.shape} differ")
    if x.ndim == 3:
        return ssim_multichannel(x, y, data_range=data_range, window=window)
    if x.ndim != 2:
        raise ShapeMismatchError(f"ssim: expected 2-D input, got shape {x.shape}")
    if data_range is None:
        data_range = max(float(np.max(x) - np.min(x)), 1e-6)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2

    h, w = x.shape
    if h < window or w < window:
        mu_x, mu_y = x.mean(), y.mean()
        var_x, var_y = x.var(), y.var()
        cov = ((x - mu_x) * (y - mu_y)).mean()
        return float(((2 * mu_x * mu_y + c1) * (2 * cov + c2))
                     / ((mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)))

    n = window * window
    mu_x = _box_sums(x, window) / n
    mu_y = _box_sums(y, window) / n
    var_x = _box_sums(x * x, window) / n - mu_x ** 2
    var_y = _box_sums(y * y, window) / n - mu_y ** 2
    cov = _box_sums(x * y, window) / n - mu_x * mu_y
    score = (((2 * mu_x * mu_y + c1) * (2 * cov + c2))
             / ((mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)))
    return float(score.mean())


def ssim_multichannel(x, y, data_range=None, window=SSIM_WINDOW):
    """Per-channel SSIM of [C, H, W] inputs, averaged over channels."""
    if data_range is None:
        data_range = max(float(np.max(x) - np.min(x)), 1e-6)
    return float(np.mean([ssim(xc, yc, data_range=data_range, window=window)
                          for xc, yc in zip(x, y)]))


@dataclass
class ReconMetrics:
    mse: float
    psnr: float
    ssim: float


def recon_metrics(reference, reconstruction):
    """MSE/PSNR/SSIM of a reconstruction against its reference.

    The reference fixes the dynamic range; feature maps [C, H, W] are
    scored per channel and averaged.
    """
    reference = np.asarray(reference, dtype=np.float64)
    reconstruction = np.asarray(reconstruction, dtype=np.float64)
    return ReconMetrics(
        mse=mse(reference, reconstruction),
        psnr=psnr(reference, reconstruction),
        ssim=ssim(reference, reconstruction),
    )


# ----------------- aggregate segmentation metrics -----------------

@dataclass
class SegMetrics:
    dice: float
    iou_wb: float
    iou_nb: float
    precision: float
    recall: float
    f1: float
    hd95: float
    assd: float
    flagged: bool = False

    FIELDS = ("dice", "iou_wb", "iou_nb", "precision", "recall", "f1", "hd95", "assd")

    def as_row(self):
        return [getattr(self, f) for f in self.FIELDS]


def segmentation_metrics(pred, truth, num_classes):
    """Overlap scores plus surface distances for one sample.

    Surface distances are averaged over the foreground classes; a class
    missing on both sides contributes 0 (flagged), a class missing on one
    side contributes the image diagonal (flagged).
    """
    scores = confusion_scores(pred, truth, num_classes)
    h, w = np.asarray(pred).shape
    diagonal = float(np.hypot(h, w))
    hd_values, assd_values = [], []
    flagged = bool(scores.undefined)
    for c in range(1, num_classes):
        pb = boundary_points(np.asarray(pred) == c)
        tb = boundary_points(np.asarray(truth) == c)
        if len(pb) == 0 and len(tb) == 0:
            hd_values.append(0.0)
            assd_values.append(0.0)
            flagged = True
        elif len(pb) == 0 or len(tb) == 0:
            hd_values.append(diagonal)
            assd_values.append(diagonal)
            flagged = True
        else:
            hd_values.append(hd95(pb, tb))
            assd_values.append(assd(pb, tb))
    return SegMetrics(
        dice=scores.dice, iou_wb=scores.iou_wb, iou_nb=scores.iou_nb,
        precision=scores.precision, recall=scores.recall, f1=scores.f1,
        hd95=float(np.mean(hd_values)) if hd_values else 0.0,
        assd=float(np.mean(assd_values)) if assd_values else 0.0,
        flagged=flagged,
    )


def mean_seg_metrics(metrics_list):
    if not metrics_list:
        return SegMetrics(*([0.0] * 8))
    values = {f: float(np.mean([getattr(m, f) for m in metrics_list])) for f in SegMetrics.FIELDS}
    return SegMetrics(flagged=any(m.flagged for m in metrics_list), **values)
