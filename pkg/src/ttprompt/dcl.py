"""Dynamic contrastive regularizer over missing-aware prompts.

Two patterns overlap when they share an observed view. Their weighted overlap
is ``sum_v m_i[v] * sigmoid(w[v]) * m_j[v]``; overlapping pairs are pulled
together (squared distance) and disjoint pairs are pushed at least ``alpha``
apart (squared hinge on the Euclidean distance).

Because ``sigmoid > 0`` everywhere, pair membership does not depend on ``w``
and the plain loss has zero gradient with respect to it. Setting
``weighted_positive=True`` scales each positive pair by its overlap score,
which does give ``w`` a gradient.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ept import bits_matrix
from .errors import NumericalError, ShapeError, ValidationError
from .numcore import sigmoid


@dataclass
class PairSets:
    """Positive/negative pairs as column positions into ``patterns``.

    ``patterns`` is sorted ascending by pattern index and pairs are
    enumerated ``i < j`` in row-major order.
    """

    patterns: np.ndarray
    bits: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray

    def incidence(self, which: str) -> np.ndarray:
        """``|pairs| x P`` matrix with +1 at the first and -1 at the second member."""
        arr = getattr(self, which)
        inc = np.zeros((len(arr), self.patterns.size))
        rows = np.arange(len(arr))
        inc[rows, arr[:, 0]] = 1.0
        inc[rows, arr[:, 1]] = -1.0
        return inc

    def as_index_pairs(self, which: str = "positives") -> list[tuple[int, int]]:
        arr = getattr(self, which)
        return [(int(self.patterns[i]), int(self.patterns[j])) for i, j in arr]


def overlap_score(m_i, m_j, w) -> float:
    m_i, m_j = np.asarray(m_i, dtype=np.float64), np.asarray(m_j, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if not (m_i.shape == m_j.shape == w.shape):
        raise ShapeError(f"overlap_score shapes differ: {m_i.shape}, {m_j.shape}, {w.shape}")
    return float(np.sum(m_i * sigmoid(w) * m_j))


def overlap_matrix(bits: np.ndarray, w) -> np.ndarray:
    return (bits * sigmoid(np.asarray(w, dtype=np.float64))) @ bits.T


def build_pairs(patterns, w) -> PairSets:
    """Classify every unordered pair of distinct nonzero patterns by overlap sign.

    ``patterns`` is a sequence of pattern indices. The returned sets keep the
    ascending-index order; callers supply prompts in that order.
    """
    w = np.asarray(w, dtype=np.float64)
    idx = np.asarray(patterns, dtype=np.int64).ravel()
    if np.unique(idx).size != idx.size:
        raise ValidationError("duplicate patterns in pair construction")
    if np.any(idx == 0):
        raise ValidationError("the all-missing pattern cannot enter pair construction")
    idx = np.sort(idx)
    bits = bits_matrix(idx, w.shape[0])
    scores = overlap_matrix(bits, w)
    ii, jj = np.triu_indices(idx.size, k=1)
    pos = scores[ii, jj] > 0
    pairs = np.stack([ii, jj], axis=1)
    return PairSets(idx, bits, pairs[pos], pairs[~pos])


@dataclass
class DclResult:
    loss: float
    grad_prompts: np.ndarray
    grad_w: np.ndarray | None


def dcl_loss(prompts: np.ndarray, pairs: PairSets, alpha: float = 1.0, w=None,
             weighted_positive: bool = False) -> DclResult:
    """Margin loss over ``prompts`` (``d x P``, columns ordered as ``pairs.patterns``).

    At zero distance a negative pair's hinge gradient direction is undefined;
    it is taken as zero.
    """
    prompts = np.asarray(prompts, dtype=np.float64)
    if prompts.ndim != 2 or prompts.shape[1] != pairs.patterns.size:
        raise ShapeError(f"prompts shape {prompts.shape} does not match {pairs.patterns.size} patterns")
    if not np.all(np.isfinite(prompts)):
        raise NumericalError("non-finite prompt values in contrastive loss")
    if alpha <= 0:
        raise ValueError("margin alpha must be positive")
    grad = np.zeros_like(prompts)
    grad_w = None if w is None else np.zeros(np.asarray(w).shape)
    loss = 0.0

    if len(pairs.positives):
        i, j = pairs.positives[:, 0], pairs.positives[:, 1]
        diff = prompts[:, i] - prompts[:, j]
        sq = np.sum(diff * diff, axis=0)
        coef = np.full(sq.shape, 1.0 / len(i))
        if weighted_positive:
            if w is None:
                raise ValueError("weighted positive term needs view weights")
            sig = sigmoid(np.asarray(w, dtype=np.float64))
            shared = pairs.bits[i] * pairs.bits[j]
            s = shared @ sig
            loss += float(np.sum(s * sq) / len(i))
            grad_w += (shared * (sig * (1.0 - sig))).T @ sq / len(i)
            coef = coef * s
        else:
            loss += float(np.sum(sq) / len(i))
        grad += (2.0 * diff * coef) @ pairs.incidence("positives")

    if len(pairs.negatives):
        i, j = pairs.negatives[:, 0], pairs.negatives[:, 1]
        diff = prompts[:, i] - prompts[:, j]
        dist = np.sqrt(np.sum(diff * diff, axis=0))
        gap = np.maximum(0.0, alpha - dist)
        loss += float(np.sum(gap * gap) / len(i))
        safe = np.where(dist > 0, dist, 1.0)
        scale = np.where(dist > 0, -2.0 * gap / safe, 0.0) / len(i)
        grad += (diff * scale) @ pairs.incidence("negatives")

    return DclResult(loss, grad, grad_w)
