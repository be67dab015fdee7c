"""Two-class segmentation metrics with explicit edge conventions.

Class 1 is the positive class (road). All ratios with an empty denominator
return 1.0; the claim is vacuously true: IoU over an empty union, the
precision of a predictor that predicted nothing, the recall of a mask with
nothing to recall. This keeps pred == gt scoring a perfect 1.0 across the
board even for all-background images, and keeps swapping pred and gt
exchanging precision with recall exactly. F1 is 0 when precision and
recall are both 0 (the harmonic mean has nothing to average).
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .errors import DimensionError

CSV_HEADER = "name,iou_road,iou_bg,miou,acc,precision,recall,f1"


@dataclass(frozen=True)
class SegMetrics:
    iou_road: float
    iou_bg: float
    mean_iou: float
    pixel_acc: float
    precision: float
    recall: float
    f1: float

    def values(self) -> tuple[float, ...]:
        return tuple(getattr(self, f.name) for f in fields(self))


def _ratio(num: int, den: int) -> float:
    return num / den if den > 0 else 1.0


def confusion(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int, int, int]:
    """Pixel counts (tp, fp, fn, tn) for positive class 1."""
    p = np.asarray(pred)
    g = np.asarray(gt)
    if p.shape != g.shape:
        raise DimensionError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    if p.size == 0:
        raise DimensionError("empty masks")
    for name, a in (("pred", p), ("gt", g)):
        bad = ~np.isin(a, (0, 1))
        if bad.any():
            raise ValueError(f"{name} mask contains values outside {{0, 1}}")
    p = p.astype(bool)
    g = g.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    tn = p.size - tp - fp - fn
    return tp, fp, fn, tn


def from_confusion(tp: int, fp: int, fn: int, tn: int) -> SegMetrics:
    iou_road = _ratio(tp, tp + fp + fn)
    iou_bg = _ratio(tn, tn + fn + fp)
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return SegMetrics(
        iou_road=iou_road,
        iou_bg=iou_bg,
        mean_iou=0.5 * (iou_road + iou_bg),
        pixel_acc=_ratio(tp + tn, tp + fp + fn + tn),
        precision=precision,
        recall=recall,
        f1=f1,
    )


def seg_metrics(pred: np.ndarray, gt: np.ndarray) -> SegMetrics:
    """Score a {0,1} prediction mask against a {0,1} ground-truth mask."""
    return from_confusion(*confusion(pred, gt))


def csv_row(name: str, m: SegMetrics) -> str:
    body = ",".join(f"{v:.6f}" for v in m.values())
    return f"{name},{body}"
