"""NCE loss, contrastive confidence regularizer and the robust contrastive loss.

All functions work on a single :class:`ScoreRow` (one query's similarity
scores over its candidate passages). Scores are float64 and every
log-normalizer goes through max-subtracted logsumexp.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class ScoreRow:
    scores: np.ndarray
    positive_index: int = 0

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 1 or self.scores.size < 2:
            raise ValueError(f"a score row needs >= 2 candidates, got shape {self.scores.shape}")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("scores must be finite")
        if not 0 <= self.positive_index < self.scores.size:
            raise IndexError(f"positive_index {self.positive_index} out of range for K={self.scores.size}")

    @property
    def k(self) -> int:
        return self.scores.size


@dataclass
class LossBreakdown:
    nce: float
    ccr: float
    rcl: float
    beta: float


def logsumexp(s: np.ndarray) -> float:
    m = np.max(s)
    return float(m + np.log(np.sum(np.exp(s - m))))


def softmax_probs(row: ScoreRow) -> np.ndarray:
    s = row.scores
    e = np.exp(s - np.max(s))
    return e / e.sum()


def nce_terms(row: ScoreRow) -> np.ndarray:
    """General NCE loss -ln f(p, q) for every candidate at once."""
    return logsumexp(row.scores) - row.scores


def general_nce(row: ScoreRow, index: int) -> float:
    if not 0 <= index < row.k:
        raise IndexError(f"index {index} out of range for K={row.k}")
    return float(logsumexp(row.scores) - row.scores[index])


def nce_loss(row: ScoreRow) -> float:
    return general_nce(row, row.positive_index)


def _ccr_mask(row: ScoreRow, mask) -> np.ndarray:
    if mask is None:
        return np.ones(row.k, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (row.k,) or not mask.any():
        raise ValueError("ccr mask must be a non-empty boolean vector of length K")
    return mask


def ccr(row: ScoreRow, mask=None) -> float:
    """Mean general NCE loss over the row's candidates, positive included.

    ``mask`` restricts the mean to a subset of columns (e.g. to leave
    in-batch negatives out); by default every column counts.
    """
    m = _ccr_mask(row, mask)
    return float(np.mean(nce_terms(row)[m]))


def rcl(row: ScoreRow, beta: float, mask=None) -> LossBreakdown:
    if beta < 0:
        raise ValueError(f"beta must be >= 0, got {beta}")
    n = nce_loss(row)
    c = ccr(row, mask)
    return LossBreakdown(nce=n, ccr=c, rcl=n - beta * c, beta=beta)


def rcl_gradient(row: ScoreRow, beta: float, mask=None) -> np.ndarray:
    """d rcl / d scores = (1 - beta) p - onehot(positive) + beta * mask / |mask|."""
    m = _ccr_mask(row, mask)
    g = (1.0 - beta) * softmax_probs(row)
    g[row.positive_index] -= 1.0
    g[m] += beta / m.sum()
    return g


def contrastive_peer_loss(row_n: ScoreRow, peer_row: ScoreRow, peer_index: int) -> float:
    """NCE loss of the sample minus the general NCE loss of a random peer pair.

    Reference form only; training uses :func:`rcl`, its first-order
    expectation.
    """
    return nce_loss(row_n) - general_nce(peer_row, peer_index)
