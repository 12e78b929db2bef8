"""Per-image segmentation metrics and their set-level (macro) aggregation.

All overlap metrics are computed from exact pixel counts. Distance metrics use
scipy's exact Euclidean distance transform over all foreground pixels.
"""

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt

from segperf.dataset import BinaryMask
from segperf.errors import ValidationError
from segperf.types import MetricId


@dataclass(frozen=True)
class MetricValue:
    value: float
    higher_is_better: bool = True
    defined: bool = True

    @classmethod
    def undefined(cls, higher_is_better: bool = True) -> "MetricValue":
        return cls(math.nan, higher_is_better, False)


@dataclass(frozen=True)
class SetScore:
    metric: MetricId
    mean: float
    per_image: tuple[MetricValue, ...]
    n_defined: int

    @property
    def defined(self) -> bool:
        return self.n_defined > 0


def _check_shapes(pred: BinaryMask, gt: BinaryMask) -> None:
    if pred.shape != gt.shape:
        raise ValidationError(
            f"Prediction shape {pred.shape} does not match ground truth {gt.shape}"
        )


def _counts(pred: BinaryMask, gt: BinaryMask) -> tuple[int, int, int]:
    _check_shapes(pred, gt)
    inter = int(np.count_nonzero(pred.bits & gt.bits))
    return pred.count, gt.count, inter


def dice(pred: BinaryMask, gt: BinaryMask) -> MetricValue:
    n_pred, n_gt, inter = _counts(pred, gt)
    if n_pred + n_gt == 0:
        return MetricValue(1.0)
    return MetricValue(2.0 * inter / (n_pred + n_gt))


def jaccard(pred: BinaryMask, gt: BinaryMask) -> MetricValue:
    n_pred, n_gt, inter = _counts(pred, gt)
    union = n_pred + n_gt - inter
    if union == 0:
        return MetricValue(1.0)
    return MetricValue(inter / union)


def recall(pred: BinaryMask, gt: BinaryMask) -> MetricValue:
    _, n_gt, inter = _counts(pred, gt)
    if n_gt == 0:
        return MetricValue.undefined()
    return MetricValue(inter / n_gt)


def precision(pred: BinaryMask, gt: BinaryMask) -> MetricValue:
    n_pred, _, inter = _counts(pred, gt)
    if n_pred == 0:
        return MetricValue.undefined()
    return MetricValue(inter / n_pred)


def pearson_pixel(pred: BinaryMask, gt: BinaryMask) -> MetricValue:
    """Pearson correlation of the two flattened 0/1 grids."""
    n_pred, n_gt, inter = _counts(pred, gt)
    n = pred.height * pred.width
    if n_pred in (0, n) or n_gt in (0, n):
        return MetricValue.undefined()
    # closed form for binary vectors: (n*s_xy - s_x*s_y) / sqrt(var terms)
    cov = n * inter - n_pred * n_gt
    denom = math.sqrt(n_pred * (n - n_pred)) * math.sqrt(n_gt * (n - n_gt))
    return MetricValue(max(-1.0, min(1.0, cov / denom)))


def _directed_distances(source: BinaryMask, target: BinaryMask) -> np.ndarray:
    """Distance from every foreground pixel of ``source`` to the nearest
    foreground pixel of ``target``."""
    to_target = distance_transform_edt(~target.bits)
    return np.asarray(to_target[source.bits], dtype=np.float64)


def nearest_rank_percentile(values: np.ndarray, q: float) -> float:
    """Smallest value with at least ``q`` percent of the sample at or below it."""
    return float(np.percentile(values, q, method="inverted_cdf"))


def hd95(pred: BinaryMask, gt: BinaryMask) -> MetricValue:
    _check_shapes(pred, gt)
    if pred.is_empty or gt.is_empty:
        return MetricValue.undefined(higher_is_better=False)
    forward = nearest_rank_percentile(_directed_distances(pred, gt), 95)
    backward = nearest_rank_percentile(_directed_distances(gt, pred), 95)
    return MetricValue(max(forward, backward), higher_is_better=False)


def hausdorff(pred: BinaryMask, gt: BinaryMask) -> MetricValue:
    """Full (100th percentile) symmetric Hausdorff distance."""
    _check_shapes(pred, gt)
    if pred.is_empty or gt.is_empty:
        return MetricValue.undefined(higher_is_better=False)
    forward = float(_directed_distances(pred, gt).max())
    backward = float(_directed_distances(gt, pred).max())
    return MetricValue(max(forward, backward), higher_is_better=False)


MetricFn = Callable[[BinaryMask, BinaryMask], MetricValue]

METRICS: dict[MetricId, MetricFn] = {
    MetricId.DICE: dice,
    MetricId.HD95: hd95,
    MetricId.JACCARD: jaccard,
    MetricId.PEARSON: pearson_pixel,
    MetricId.RECALL: recall,
    MetricId.PRECISION: precision,
}


def compute(metric: MetricId, pred: BinaryMask, gt: BinaryMask) -> MetricValue:
    return METRICS[metric](pred, gt)


def evaluate_set(
    metric: MetricId,
    preds: Sequence[BinaryMask],
    gts: Sequence[BinaryMask],
) -> SetScore:
    """Macro average of ``metric`` over matched prediction/ground-truth lists.

    Undefined per-image values are excluded from the mean; if none is defined the
    mean is NaN and ``SetScore.defined`` is False.
    """
    if len(preds) != len(gts):
        raise ValidationError(
            f"Got {len(preds)} predictions for {len(gts)} ground-truth masks"
        )
    if len(preds) == 0:
        raise ValidationError("Cannot evaluate an empty set")
    fn = METRICS[metric]
    values = tuple(fn(p, g) for p, g in zip(preds, gts))
    defined = [v.value for v in values if v.defined]
    mean = math.fsum(defined) / len(defined) if defined else math.nan
    return SetScore(metric=metric, mean=mean, per_image=values, n_defined=len(defined))
