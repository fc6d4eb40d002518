"""Pixel-level confusion counting and binary segmentation metrics."""

from dataclasses import dataclass

import numpy as np

from . import kernels


@dataclass
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


def confusion(pred_logits, mask, threshold=0.5):
    """Tally pixel confusion counts; prediction is sigmoid(logit) >= threshold."""
    logits = np.asarray(pred_logits, dtype=np.float64)
    mask = np.asarray(mask)
    if logits.shape != mask.shape:
        raise ValueError(f"shape mismatch: {logits.shape} vs {mask.shape}")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask must be binary {0,1}")
    pred = kernels.sigmoid(np.ascontiguousarray(logits)) >= threshold
    truth = mask.astype(bool)
    return ConfusionCounts(
        tp=int(np.sum(pred & truth)),
        fp=int(np.sum(pred & ~truth)),
        fn=int(np.sum(~pred & truth)),
        tn=int(np.sum(~pred & ~truth)),
    )


def _ratio(num, den, counts):
    # empty-empty agreement scores 1.0; any other zero denominator scores 0.0
    if den == 0:
        return 1.0 if counts.tp == counts.fp == counts.fn == 0 else 0.0
    return num / den


def precision(c: ConfusionCounts):
    return _ratio(c.tp, c.tp + c.fp, c)


def recall(c: ConfusionCounts):
    return _ratio(c.tp, c.tp + c.fn, c)


def f1(c: ConfusionCounts):
    p, r = precision(c), recall(c)
    if p + r == 0:
        return 1.0 if c.tp == c.fp == c.fn == 0 else 0.0
    return 2 * p * r / (p + r)


def iou(c: ConfusionCounts):
    return _ratio(c.tp, c.tp + c.fp + c.fn, c)


def report_row(c: ConfusionCounts):
    """Percentages with 2 decimals, in precision,recall,f1,iou order."""
    return ",".join(f"{100 * m(c):.2f}" for m in (precision, recall, f1, iou))


REPORT_HEADER = "precision,recall,f1,iou"
