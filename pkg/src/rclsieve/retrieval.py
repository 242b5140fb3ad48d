"""Exact brute-force retrieval and hit-based R@k / MRR@k."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from rclsieve.data import Dataset
from rclsieve.model import EncoderParams, similarity_matrix


@dataclass
class RankedList:
    query_id: str
    passage_ids: list[str]
    scores: list[float]


@dataclass
class Metrics:
    recall_at: dict[int, float] = field(default_factory=dict)
    mrr_at: dict[int, float] = field(default_factory=dict)
    num_queries: int = 0
    num_excluded: int = 0

    def records(self) -> list[dict]:
        out = [{"metric": "recall", "k": k, "value": v, "num_queries": self.num_queries}
               for k, v in sorted(self.recall_at.items())]
        out += [{"metric": "mrr", "k": k, "value": v, "num_queries": self.num_queries}
                for k, v in sorted(self.mrr_at.items())]
        return out




def retrieve_many(
    params: EncoderParams,
    query_features: np.ndarray,
    query_ids: Sequence[str],
    corpus_features: np.ndarray,
    corpus_ids: Sequence[str],
    k: int,
) -> list[RankedList]:
    if len(corpus_ids) == 0:
        raise ValueError("empty corpus")
    if k > len(corpus_ids):
        raise ValueError(f"k={k} exceeds corpus size {len(corpus_ids)}")
    qe = np.atleast_2d(query_features) @ params.query_matrix.T
    pe = corpus_features @ params.passage_matrix.T
    sims = similarity_matrix(qe, pe, params.sim_kind)
    ids = list(corpus_ids)
    id_rank = np.empty(len(ids), dtype=np.int64)
    id_rank[np.argsort(np.asarray(ids, dtype=object), kind="stable")] = np.arange(len(ids))
    out = []
    for qid, row in zip(query_ids, sims):
        order = np.lexsort((id_rank, -row))[:k]
        out.append(RankedList(qid, [ids[i] for i in order], row[order].tolist()))
    return out


def brute_force_retrieve(params: EncoderParams, query, corpus: Mapping[str, np.ndarray], k: int,
                         query_id: str = "") -> RankedList:
    """Exact top-k of one query over ``corpus`` (passage_id -> feature vector)."""
    if not corpus:
        raise ValueError("empty corpus")
    ids = list(corpus)
    feats = np.stack([np.asarray(corpus[p], dtype=np.float64) for p in ids])
    return retrieve_many(params, np.asarray(query, dtype=np.float64)[None, :], [query_id], feats, ids, k)[0]


def first_relevant_rank(ranked: RankedList, relevant: Iterable[str]) -> int | None:
    rel = set(relevant)
    for i, pid in enumerate(ranked.passage_ids, start=1):
        if pid in rel:
            return i
    return None


def hit_at_k(ranked: RankedList, relevant: Iterable[str], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    r = first_relevant_rank(ranked, relevant)
    return 1.0 if r is not None and r <= k else 0.0


def reciprocal_rank(ranked: RankedList, relevant: Iterable[str], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    r = first_relevant_rank(ranked, relevant)
    return 1.0 / r if r is not None and r <= k else 0.0


def _mean_over(rankings, relevance, k, fn) -> float:
    vals = [fn(r, relevance[r.query_id], k) for r in rankings if relevance.get(r.query_id)]
    return float(np.mean(vals)) if vals else 0.0


def recall_at_k(rankings: Sequence[RankedList], relevance: Mapping[str, set], k: int) -> float:
    """Fraction of queries with any relevant passage in the top k; queries without relevant ids are skipped."""
    return _mean_over(rankings, relevance, k, hit_at_k)


def mrr_at_k(rankings: Sequence[RankedList], relevance: Mapping[str, set], k: int) -> float:
    return _mean_over(rankings, relevance, k, reciprocal_rank)


def evaluate_rankings(rankings, relevance, ks=(5, 20, 100), mrr_ks=(10,)) -> Metrics:
    n = sum(1 for r in rankings if relevance.get(r.query_id))
    return Metrics(
        recall_at={k: recall_at_k(rankings, relevance, k) for k in ks},
        mrr_at={k: mrr_at_k(rankings, relevance, k) for k in mrr_ks},
        num_queries=n,
        num_excluded=len(rankings) - n,
    )


def evaluate(params: EncoderParams, dataset: Dataset, ks=(5, 20, 100), mrr_ks=(10,)) -> Metrics:
    """Retrieve every query of ``dataset`` over its whole corpus and score the rankings.

    Relevant passages are each example's ``relevant_ids`` (its positive when unset).
    """
    depth = min(max([*ks, *mrr_ks]), len(dataset.passage_ids))
    rankings = retrieve_many(params, dataset.query_matrix, [e.query_id for e in dataset.examples],
                             dataset.passage_matrix, dataset.passage_ids, depth)
    relevance = {e.query_id: e.relevant() for e in dataset.examples}
    return evaluate_rankings(rankings, relevance, ks, mrr_ks)
