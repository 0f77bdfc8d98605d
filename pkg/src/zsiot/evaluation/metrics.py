"""Detection and GZSL metrics, and fold aggregation."""

from __future__ import annotations

import logging
import warnings
from typing import Sequence

import numpy as np
from sklearn.metrics import precision_recall_fscore_support

from ..errors import ValidationError

logger = logging.getLogger(__name__)


def detection_metrics(pred_seen: Sequence[bool], true_seen: Sequence[bool]) -> dict:
    """Support-weighted precision/recall/F1 over the two classes {Seen, Unseen}."""
    pred = np.asarray(pred_seen, dtype=bool)
    true = np.asarray(true_seen, dtype=bool)
    if len(true) == 0 or len(pred) != len(true):
        raise ValidationError("detection metrics need equal-length, non-empty inputs")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        p, r, f, _ = precision_recall_fscore_support(true, pred, labels=[True, False], average="weighted",
                                                     zero_division=0)
    return {"precision": float(p), "recall": float(r), "f1": float(f)}


def harmonic_mean(acc_s: float, acc_u: float) -> float:
    if acc_s + acc_u == 0:
        return 0.0
    return 2 * acc_s * acc_u / (acc_s + acc_u)


def weighted_group_accuracy(pred: np.ndarray, truth: np.ndarray, classes: Sequence[int]) -> float:
    """Support-weighted mean of per-class recall over ``classes`` present in ``truth``."""
    recalls, weights = [], []
    for c in classes:
        mask = truth == c
        n = int(mask.sum())
        if n == 0:
            logger.warning("class %d missing from the test truth; excluded from weighting", c)
            continue
        recalls.append(float((pred[mask] == c).mean()))
        weights.append(n)
    if not weights:
        return 0.0
    return float(np.average(recalls, weights=weights))


def gzsl_metrics(predictions: Sequence[int], truth: Sequence[int], seen_classes: Sequence[int],
                 unseen_classes: Sequence[int]) -> dict:
    pred = np.asarray(predictions)
    truth = np.asarray(truth)
    acc_s = weighted_group_accuracy(pred, truth, seen_classes)
    acc_u = weighted_group_accuracy(pred, truth, unseen_classes)
    return {"acc_s": acc_s, "acc_u": acc_u, "acc_h": harmonic_mean(acc_s, acc_u)}


def kfold_aggregate(per_fold: Sequence[dict]) -> dict:
    """Mean and population variance of every numeric entry across folds.

    Nested dicts are aggregated leaf by leaf; ``acc_h`` is the mean of per-fold
    values, never recomputed from averaged accuracies.
    """
    if not per_fold:
        raise ValidationError("need at least one fold report")

    def agg(items):
        first = items[0]
        if isinstance(first, dict):
            out = {k: agg([it[k] for it in items]) for k in first if all(k in it for it in items)}
            return {k: v for k, v in out.items() if v is not None}
        if isinstance(first, bool) or not isinstance(first, (int, float, np.integer, np.floating)):
            return None
        vals = np.asarray(items, dtype=np.float64)
        return {"mean": float(vals.mean()), "var": float(vals.var())}

    return agg(list(per_fold))
