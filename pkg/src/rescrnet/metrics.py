"""Hard-mask evaluation metrics over argmax-decoded predictions."""

from dataclasses import dataclass

import numpy as np

METRIC_COLUMNS = ("dice", "jaccard", "precision", "recall", "f1")


@dataclass
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self):
        return self.tp + self.fp + self.fn + self.tn


def _safe_ratio(num, den, tp, fp, fn):
    # TP=FP=FN=0 means the class is absent and never predicted: perfect.
    if tp == 0 and fp == 0 and fn == 0:
        return 1.0
    if den == 0:
        return 0.0
    return num / den


def confusion_counts(yhat, y):
    """Per-class TP/FP/FN/TN from per-pixel argmax of prediction and truth."""
    yhat = np.asarray(yhat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if yhat.shape != y.shape:
        raise ValueError(f"shape mismatch: {yhat.shape} vs {y.shape}")
    k = yhat.shape[-1]
    pred = yhat.argmax(axis=-1).ravel()
    true = y.argmax(axis=-1).ravel()
    n = pred.size
    out = []
    for c in range(k):
        p = pred == c
        t = true == c
        tp = int(np.count_nonzero(p & t))
        fp = int(np.count_nonzero(p & ~t))
        fn = int(np.count_nonzero(~p & t))
        out.append(ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=n - tp - fp - fn))
    return out


def metrics_from_counts(c):
    tp, fp, fn = c.tp, c.fp, c.fn
    precision = _safe_ratio(tp, tp + fp, tp, fp, fn)
    recall = _safe_ratio(tp, tp + fn, tp, fp, fn)
    f1 = _safe_ratio(2.0 * precision * recall, precision + recall, tp, fp, fn)
    return {
        "dice": _safe_ratio(2.0 * tp, 2.0 * tp + fp + fn, tp, fp, fn),
        "jaccard": _safe_ratio(tp, tp + fp + fn, tp, fp, fn),
        "precision": precision,
        "recall": recall,
        "f1": f1,
    }


def confusion_and_metrics(yhat, y):
    """Per-class and macro-averaged dice/jaccard/precision/recall/f1."""
    counts = confusion_counts(yhat, y)
    per_class = [metrics_from_counts(c) for c in counts]
    macro = {m: float(np.mean([pc[m] for pc in per_class])) for m in METRIC_COLUMNS}
    return {"per_class": per_class, "macro": macro, "counts": counts}
