"""Pixel confusion matrices and the class-mean segmentation metrics."""

from __future__ import annotations

import numpy as np


class ConfusionMatrix:
    """K x K integer counts, rows = ground truth, columns = prediction."""

    def __init__(self, num_classes: int, counts: np.ndarray | None = None):
        self.num_classes = int(num_classes)
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (num_classes, num_classes):
            raise ValueError(f"counts must be {num_classes}x{num_classes}, got {counts.shape}")
        if (counts < 0).any():
            raise ValueError("confusion counts must be non-negative")
        self.counts = counts.copy()

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def accumulate(self, predictions, labels) -> "ConfusionMatrix":
        pred = np.asarray(predictions).astype(np.int64).ravel()
        gt = np.asarray(labels).astype(np.int64).ravel()
        if pred.shape != gt.shape:
            raise ValueError(f"prediction shape {np.shape(predictions)} != label shape {np.shape(labels)}")
        k = self.num_classes
        for name, arr in (("prediction", pred), ("label", gt)):
            if arr.size and (arr.min() < 0 or arr.max() >= k):
                raise ValueError(f"{name} class out of range [0, {k})")
        self.counts += np.bincount(gt * k + pred, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices with different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def __add__(self, other):
        return self.merge(other)

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)


def accumulate(cm: ConfusionMatrix, predictions, labels) -> ConfusionMatrix:
    return cm.accumulate(predictions, labels)


def _ratio(num: np.ndarray, den: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    undefined = den == 0
    out = np.divide(num, den, out=np.zeros(num.shape, dtype=np.float64), where=~undefined)
    return out, undefined


def summarize(cm: ConfusionMatrix | np.ndarray) -> dict:
    """Unweighted class means of IoU, precision, recall and F1.

    Any 0/0 ratio is reported as 0 and listed under ``undefined`` for that class.
    """
    if not isinstance(cm, ConfusionMatrix):
        arr = np.asarray(cm)
        cm = ConfusionMatrix(arr.shape[0], arr)
    if cm.total == 0:
        raise ValueError("confusion matrix is empty")
    c = cm.counts.astype(np.float64)
    tp = np.diag(c)
    fp = c.sum(axis=0) - tp
    fn = c.sum(axis=1) - tp
    iou, u_iou = _ratio(tp, tp + fp + fn)
    pre, u_pre = _ratio(tp, tp + fp)
    rec, u_rec = _ratio(tp, tp + fn)
    f1, u_f1 = _ratio(2 * pre * rec, pre + rec)
    per_class = []
    for k in range(cm.num_classes):
        flags = [n for n, u in (("iou", u_iou), ("precision", u_pre), ("recall", u_rec), ("f1", u_f1)) if u[k]]
        per_class.append({
            "class": k,
            "iou": float(iou[k]),
            "precision": float(pre[k]),
            "recall": float(rec[k]),
            "f1": float(f1[k]),
            "undefined": flags,
        })
    return {
        "mIoU": float(iou.mean()),
        "mPre": float(pre.mean()),
        "mRec": float(rec.mean()),
        "mF1": float(f1.mean()),
        "per_class": per_class,
    }
