"""Confusion-matrix segmentation metrics: IoU, mIoU, FP/FN rates."""

from __future__ import annotations

import csv

import numpy as np


class MetricError(ValueError):
    pass


class Confusion:
    """(C+1)x(C+1) pixel counts; rows are ground truth, columns predictions, 0 is background."""

    def __init__(self, num_classes: int, counts=None):
        self.num_classes = num_classes
        k = num_classes + 1
        self.counts = np.zeros((k, k), dtype=np.int64) if counts is None else np.asarray(counts, dtype=np.int64).copy()
        if self.counts.shape != (k, k):
            raise MetricError(f"counts must be {k}x{k}")

    def accumulate(self, pred, gt) -> "Confusion":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise MetricError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
        k = self.num_classes + 1
        for name, m in (("prediction", pred), ("ground truth", gt)):
            if m.size and (m.min() < 0 or m.max() >= k):
                raise MetricError(f"{name} label outside 0..{self.num_classes}")
        idx = gt.astype(np.int64).ravel() * k + pred.astype(np.int64).ravel()
        self.counts += np.bincount(idx, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "Confusion") -> "Confusion":
        return Confusion(self.num_classes, self.counts + other.counts)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def accumulate(conf: Confusion, pred, gt) -> Confusion:
    return conf.accumulate(pred, gt)


def miou(conf: Confusion) -> tuple[float, np.ndarray]:
    """Mean IoU over classes with a non-empty union (background included).

    Per-class IoUs of excluded classes are NaN.
    """
    c = conf.counts.astype(np.float64)
    tp = np.diag(c)
    union = c.sum(axis=0) + c.sum(axis=1) - tp
    if not (union > 0).any():
        raise MetricError("every class has an empty union")
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / union, np.nan)
    return float(np.nanmean(iou)), iou


def fp_fn_rates(conf: Confusion) -> tuple[float, float]:
    """Over-/under-activation normalised by the ground-truth foreground pixel count."""
    c = conf.counts
    fg = c[1:, :].sum()
    if fg == 0:
        raise MetricError("no foreground ground-truth pixels")
    tp = np.diag(c)[1:].sum()
    fp = c[:, 1:].sum() - tp
    fn = fg - tp
    return float(fp / fg), float(fn / fg)


def texture_fp(preds, textures) -> float:
    """Fraction of companion-texture pixels predicted as any foreground class."""
    hit = total = 0
    for p, t in zip(preds, textures):
        t = np.asarray(t, dtype=bool)
        total += int(t.sum())
        hit += int((np.asarray(p)[t] > 0).sum())
    return hit / total if total else 0.0


def write_report(path, conf: Confusion, extra: dict[str, float] | None = None) -> None:
    """CSV ``class,iou`` followed by ``miou``, ``fp``, ``fn`` summary rows."""
    m, iou = miou(conf)
    fp, fn = fp_fn_rates(conf)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "iou"])
        for k, v in enumerate(iou):
            w.writerow([k, "" if np.isnan(v) else f"{v:.6f}"])
        w.writerow(["miou", f"{m:.6f}"])
        w.writerow(["fp", f"{fp:.6f}"])
        w.writerow(["fn", f"{fn:.6f}"])
        for key, val in (extra or {}).items():
            w.writerow([key, f"{val:.6f}"])
