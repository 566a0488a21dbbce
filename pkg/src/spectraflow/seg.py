"""Segmentation losses (region + boundary) and evaluation metrics.

Losses take a prediction Var and a binary target with matching shape
(``H x W``, ``1 x H x W`` or ``N x 1 x H x W``). Dice terms are computed per
image and averaged; BCE is a mean over all pixels.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from . import autodiff as ad
from .autodiff import ContractError, Var

CLAMP = 1e-7


def _as_images(pred: Var, gt: np.ndarray) -> tuple[Var, np.ndarray]:
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ContractError(f"prediction {pred.shape} and target {gt.shape} shapes differ")
    if pred.ndim < 2:
        raise ContractError("need at least a 2-D map")
    n = int(np.prod(pred.shape[:-2])) if pred.ndim > 2 else 1
    h, w = pred.shape[-2:]
    return ad.reshape(pred, (n, h * w)), gt.reshape(n, h * w)


def dice_loss(pred, gt, smooth: float = 1.0) -> Var:
    if smooth <= 0:
        raise ContractError("smooth must be positive")
    p, g = _as_images(ad.as_var(pred), gt)
    inter = ad.sum_(ad.mul(p, g), axis=1)
    denom = ad.add(ad.sum_(p, axis=1), g.sum(1) + smooth)
    return ad.mean(ad.sub(1.0, ad.div(ad.add(ad.mul(inter, 2.0), smooth), denom)))


def bce_loss(pred, gt) -> Var:
    p, g = _as_images(ad.as_var(pred), gt)
    p = ad.clip(p, CLAMP, 1.0 - CLAMP)
    ll = ad.add(ad.mul(ad.log(p), g), ad.mul(ad.log(ad.sub(1.0, p)), 1.0 - g))
    return ad.mul(ad.mean(ll), -1.0)


def dice_bce_loss(pred, gt, smooth: float = 1.0) -> Var:
    """Equal-weight Dice loss plus binary cross-entropy."""
    return ad.add(ad.mul(dice_loss(pred, gt, smooth), 0.5), ad.mul(bce_loss(pred, gt), 0.5))


def soft_boundary(x) -> Var:
    """``|x - mean3x3(x)|``; zero on constant fields, large along edges."""
    x = ad.as_var(x)
    shape = x.shape
    h, w = shape[-2:]
    flat = ad.reshape(x, (-1, 1, h, w))
    return ad.reshape(ad.abs_(ad.sub(flat, ad.box_mean3(flat))), shape)


def boundary_loss(pred, gt) -> Var:
    """Mean squared difference of soft boundary maps."""
    pred = ad.as_var(pred)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ContractError(f"prediction {pred.shape} and target {gt.shape} shapes differ")
    with ad.no_grad():
        bg = soft_boundary(gt).value
    return ad.mean(ad.square(ad.sub(soft_boundary(pred), bg)))


def stage2_loss(pred, gt, beta: float = 1.0, smooth: float = 1.0) -> Var:
    if beta < 0:
        raise ContractError("beta must be non-negative")
    loss = dice_bce_loss(pred, gt, smooth)
    if beta == 0:
        return loss
    return ad.add(loss, ad.mul(boundary_loss(pred, gt), beta))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def binarize(pred, threshold: float = 0.5) -> np.ndarray:
    return np.asarray(pred, dtype=np.float64) > threshold


def _check_pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ContractError(f"prediction {pred.shape} and target {gt.shape} shapes differ")
    return np.squeeze(pred), np.squeeze(gt)


def region_metrics(pred, gt, threshold: float = 0.5) -> dict[str, float]:
    """Dice, IoU, precision and recall of the binarized prediction.

    Empty denominators count as perfect: two empty masks score 1.0 on every
    metric, an empty prediction has precision 1.0, an empty target recall 1.0.
    """
    pred, gt = _check_pair(pred, gt)
    p = binarize(pred, threshold)
    g = gt > 0.5
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))

    def ratio(num, den):
        return 1.0 if den == 0 else num / den

    return {
        "dice": ratio(2 * tp, 2 * tp + fp + fn),
        "iou": ratio(tp, tp + fp + fn),
        "precision": ratio(tp, tp + fp),
        "recall": ratio(tp, tp + fn),
    }


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """Foreground pixels with a background 4-neighbour or on the image edge."""
    m = np.asarray(mask, dtype=bool)
    pad = np.pad(m, 1, constant_values=False)
    interior = pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
    return m & ~interior


def _nearest(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Euclidean distance from each ``src`` pixel to the nearest ``dst`` pixel."""
    field = ndimage.distance_transform_edt(~dst)
    return field[src]


def hd95_with_flag(pred, gt, percentile: float = 95.0, threshold: float = 0.5) -> tuple[float, bool]:
    """Percentile of pooled boundary-to-boundary distances, plus a sentinel flag.

    If exactly one mask is empty the image diagonal is returned and the flag is
    set; two empty masks give 0.
    """
    pred, gt = _check_pair(pred, gt)
    bp = boundary_pixels(binarize(pred, threshold))
    bg = boundary_pixels(gt > 0.5)
    if not bp.any() and not bg.any():
        return 0.0, False
    if not bp.any() or not bg.any():
        h, w = pred.shape
        return math.hypot(h, w), True
    d = np.concatenate([_nearest(bp, bg), _nearest(bg, bp)])
    return float(np.percentile(d, percentile)), False


def hd95(pred, gt, percentile: float = 95.0, threshold: float = 0.5) -> float:
    return hd95_with_flag(pred, gt, percentile, threshold)[0]


@dataclass
class SampleMetrics:
    sample_id: int
    dice: float
    iou: float
    precision: float
    recall: float
    hd95: float
    hd95_sentinel: bool = False

    def record(self) -> dict:
        return asdict(self)


def evaluate_pair(sample_id: int, pred, gt, threshold: float = 0.5) -> SampleMetrics:
    r = region_metrics(pred, gt, threshold)
    h, flag = hd95_with_flag(pred, gt, threshold=threshold)
    return SampleMetrics(sample_id, r["dice"], r["iou"], r["precision"], r["recall"], h, flag)


METRIC_KEYS = ("dice", "iou", "precision", "recall", "hd95")


def aggregate(records: list[SampleMetrics]) -> dict[str, float]:
    """Per-image metrics averaged in record order."""
    if not records:
        raise ContractError("no records to aggregate")
    out = {k: float(np.mean([getattr(r, k) for r in records])) for k in METRIC_KEYS}
    out["n"] = len(records)
    out["hd95_sentinels"] = sum(r.hd95_sentinel for r in records)
    return out
