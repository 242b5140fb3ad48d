"""Passage sieve: keep only the hard negatives whose loss reaches the query's mean loss."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from rclsieve.data import Dataset
from rclsieve.losses import ScoreRow, nce_terms, softmax_probs
from rclsieve.model import EncoderParams, score_batch
from rclsieve.trainer import TrainConfig, TrainResult, train


@dataclass
class QuerySieve:
    query_id: str
    threshold: Optional[float]
    kept_ids: list[str]
    dropped_ids: list[str]


@dataclass
class SieveReport:
    queries: list[QuerySieve] = field(default_factory=list)

    @property
    def kept(self) -> int:
        return sum(len(q.kept_ids) for q in self.queries)

    @property
    def dropped(self) -> int:
        return sum(len(q.dropped_ids) for q in self.queries)

    @property
    def sieve_out_rate(self) -> float:
        total = self.kept + self.dropped
        return self.dropped / total if total else 0.0

    def records(self) -> list[dict]:
        out = [
            {"query_id": q.query_id, "th": q.threshold, "kept_ids": q.kept_ids, "dropped_ids": q.dropped_ids}
            for q in self.queries
        ]
        out.append(
            {"type": "summary", "queries": len(self.queries), "kept": self.kept,
             "dropped": self.dropped, "sieve_out_rate": self.sieve_out_rate}
        )
        return out


def sieve_row(row: ScoreRow) -> tuple[float, np.ndarray]:
    """Threshold and keep mask over one row of positive + hard negatives.

    The threshold is the mean general NCE loss over the whole row; a
    candidate is kept when its loss is >= the threshold. The comparison is
    done as ``K * loss >= fsum(losses)`` so rows of equal losses tie
    exactly and are kept.
    """
    losses = nce_terms(row)
    total = math.fsum(losses.tolist())
    keep = losses * row.k >= total
    keep[row.positive_index] = True
    return total / row.k, keep


def sieve_threshold(params: EncoderParams, query, candidates, positive_index: int = 0) -> float:
    """Mean general NCE loss of the query's positive and hard negatives under cosine."""
    return sieve_row(cosine_row(params, query, candidates, positive_index))[0]


def cosine_row(params: EncoderParams, query, candidates, positive_index: int = 0) -> ScoreRow:
    return score_batch(params.with_sim("cosine"), [query], [candidates], [positive_index])[0]


def sieve_dataset(params: EncoderParams, dataset: Dataset) -> tuple[Dataset, SieveReport]:
    """Apply the sieve rule to every query; scoring always uses cosine similarity.

    ``params`` should already be refined with the RCL objective
    (:func:`refine_and_sieve` does both).
    """
    if params.feature_dim != dataset.feature_dim:
        raise ValueError(f"model feature_dim {params.feature_dim} != dataset feature_dim {dataset.feature_dim}")
    model = params.with_sim("cosine")
    pindex = dataset.passage_index
    pemb = dataset.passage_matrix @ model.passage_matrix.T
    qemb = dataset.query_matrix @ model.query_matrix.T
    report = SieveReport()
    kept_map = {}
    for qi, ex in enumerate(dataset.examples):
        negs = list(ex.negative_ids)
        if not negs:
            report.queries.append(QuerySieve(ex.query_id, None, [], []))
            kept_map[ex.query_id] = []
            continue
        ids = [ex.positive_id] + negs
        v = pemb[[pindex[p] for p in ids]]
        u = qemb[qi]
        denom = np.linalg.norm(u) * np.linalg.norm(v, axis=1)
        s = np.zeros(len(ids))
        np.divide(v @ u, denom, out=s, where=denom > 0)
        th, keep = sieve_row(ScoreRow(model.scale * np.clip(s, -1.0, 1.0), 0))
        kept = [p for p, k in zip(negs, keep[1:]) if k]
        dropped = [p for p, k in zip(negs, keep[1:]) if not k]
        report.queries.append(QuerySieve(ex.query_id, th, kept, dropped))
        kept_map[ex.query_id] = kept
    return dataset.with_negatives(kept_map), report


def refine_and_sieve(
    params: EncoderParams, dataset: Dataset, config: TrainConfig, progress_sink=None
) -> tuple[Dataset, SieveReport, TrainResult]:
    """RCL refinement for ``config.epochs`` epochs followed by the sieve."""
    result = train(params, dataset, config, progress_sink)
    sieved, report = sieve_dataset(result.params, dataset)
    return sieved, report, result


@dataclass
class LemmaCheck:
    f_value: float
    selected: bool
    violated: bool


def lemma1_oracle(row: ScoreRow) -> list[LemmaCheck]:
    """Per negative: softmax score, sieve decision and whether the guarantee broke.

    A negative scored strictly above a uniform guess 1/(|N_q| + 1) must not be
    selected.
    """
    probs = softmax_probs(row)
    _, keep = sieve_row(row)
    guess = 1.0 / row.k
    out = []
    for j in range(row.k):
        if j == row.positive_index:
            continue
        sel = bool(keep[j])
        out.append(LemmaCheck(float(probs[j]), sel, bool(probs[j] > guess and sel)))
    return out
