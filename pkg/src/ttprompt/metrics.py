"""Multi-label ranking and thresholding metrics."""
from __future__ import annotations

import numpy as np

THRESHOLD = 0.5


def average_precision(scores, labels) -> float:
    """Precision averaged at each positive's rank.

    Samples are ranked by descending score, with ties broken by ascending
    sample index. Returns ``nan`` when there are no positives.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    npos = int(labels.sum())
    if npos == 0:
        return float("nan")
    order = np.argsort(-scores, kind="stable")
    rel = labels[order]
    hits = np.cumsum(rel)
    precision = hits / np.arange(1, rel.size + 1)
    return float(precision[rel].sum() / npos)


def mean_average_precision(scores, labels) -> tuple[float, int]:
    """Mean AP over classes with at least one positive; also the skipped count."""
    scores, labels = np.asarray(scores), np.asarray(labels)
    aps = [average_precision(scores[:, c], labels[:, c]) for c in range(labels.shape[1])]
    valid = [a for a in aps if not np.isnan(a)]
    skipped = len(aps) - len(valid)
    return (float(np.mean(valid)) if valid else float("nan")), skipped


def _f1(tp, fp, fn):
    denom = 2 * tp + fp + fn
    return np.where(denom > 0, 2 * tp / np.maximum(denom, 1), 0.0)


def f1_scores(probs, labels, threshold: float = THRESHOLD) -> tuple[float, float]:
    """Macro (per-class, positive classes only) and micro F1 at ``prob >= threshold``."""
    pred = np.asarray(probs) >= threshold
    y = np.asarray(labels).astype(bool)
    tp = (pred & y).sum(axis=0)
    fp = (pred & ~y).sum(axis=0)
    fn = (~pred & y).sum(axis=0)
    has_pos = y.sum(axis=0) > 0
    cf1 = float(np.mean(_f1(tp, fp, fn)[has_pos])) if has_pos.any() else float("nan")
    of1 = float(_f1(tp.sum(), fp.sum(), fn.sum()))
    return cf1, of1
