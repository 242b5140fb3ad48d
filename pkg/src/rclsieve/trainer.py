"""Batch assembly, backpropagation through the linear towers and plain SGD."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from rclsieve.data import Dataset
from rclsieve.losses import LossBreakdown, ScoreRow, rcl, rcl_gradient
from rclsieve.model import SIM_KINDS, EncoderParams, SimKind

logger = logging.getLogger(__name__)

DEFAULT_BETA = {"cosine": 0.5, "dot": 0.001}
DIVERGENCE_LIMIT = 1e6

POSITIVE, HARD_NEGATIVE, IN_BATCH_NEGATIVE = "positive", "hard_negative", "in_batch_negative"


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    beta: Optional[float] = None  # None -> DEFAULT_BETA[sim_kind]
    learning_rate: float = 0.1
    epochs: int = 1
    batch_size: int = 16
    hard_negatives_per_query: Optional[int] = None  # None -> every stored negative
    sim_kind: SimKind = "cosine"
    seed: int = 0
    include_in_batch_negatives: bool = True
    # ablation: leave in-batch columns out of the regularizer mean
    ccr_in_batch: bool = True

    def __post_init__(self):
        if self.sim_kind not in SIM_KINDS:
            raise ValueError(f"unknown sim_kind {self.sim_kind!r}")
        if self.beta is None:
            self.beta = DEFAULT_BETA[self.sim_kind]
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.hard_negatives_per_query is not None and self.hard_negatives_per_query < 0:
            raise ValueError("hard_negatives_per_query must be >= 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.sim_kind == "cosine" and self.beta > 1:
            raise ValueError(f"cosine training needs beta in [0, 1], got {self.beta}")
        if self.sim_kind == "dot" and self.beta > 0.01:
            logger.warning("beta=%g with unbounded dot-product scores; values <= 0.01 are recommended", self.beta)


@dataclass
class Batch:
    query_ids: list[str]
    query_features: np.ndarray  # (B, F)
    candidate_ids: list[list[str]]
    candidate_features: list[np.ndarray]  # each (K_i, F)
    tags: list[list[str]]
    positive_index: list[int]

    def ccr_masks(self, ccr_in_batch: bool) -> list[Optional[np.ndarray]]:
        if ccr_in_batch:
            return [None] * len(self.tags)
        return [np.array([t != IN_BATCH_NEGATIVE for t in tags]) for tags in self.tags]


@dataclass
class Gradients:
    """Gradients shaped like the towers; for tied towers both fields are the same summed array."""

    query_matrix: np.ndarray
    passage_matrix: np.ndarray

    def norm(self) -> float:
        if self.query_matrix is self.passage_matrix:
            return float(np.linalg.norm(self.query_matrix))
        return float(np.sqrt(np.sum(self.query_matrix**2) + np.sum(self.passage_matrix**2)))


@dataclass
class OptimizerState:
    step: int = 0
    last_gradients: Optional[Gradients] = None


@dataclass
class TrainResult:
    params: EncoderParams
    trace: list[dict] = field(default_factory=list)


def build_batches(dataset: Dataset, config: TrainConfig, epoch: int = 0) -> list[Batch]:
    """Seeded shuffle into batches of (positive, hard negatives, in-batch negatives).

    Each row lists its own positive first, then its first
    ``hard_negatives_per_query`` stored negatives, then the positives of the
    other queries in the batch that are not already in the row.
    """
    if len(dataset) == 0:
        raise ValueError("cannot build batches from an empty dataset")
    rng = np.random.default_rng([config.seed, epoch])
    order = rng.permutation(len(dataset))
    pmat = dataset.passage_matrix
    pindex = dataset.passage_index
    short = 0
    batches = []
    for start in range(0, len(order), config.batch_size):
        idx = order[start : start + config.batch_size]
        exs = [dataset.examples[i] for i in idx]
        positives = [ex.positive_id for ex in exs]
        cand_ids, tags = [], []
        for ex in exs:
            negs = ex.negative_ids
            h = config.hard_negatives_per_query
            if h is not None:
                if len(negs) < h:
                    short += 1
                negs = negs[:h]
            ids = [ex.positive_id] + list(negs)
            tag = [POSITIVE] + [HARD_NEGATIVE] * len(negs)
            if config.include_in_batch_negatives:
                present = set(ids)
                for pid in positives:
                    if pid not in present:
                        ids.append(pid)
                        tag.append(IN_BATCH_NEGATIVE)
                        present.add(pid)
            cand_ids.append(ids)
            tags.append(tag)
        batches.append(
            Batch(
                query_ids=[ex.query_id for ex in exs],
                query_features=dataset.query_matrix[idx],
                candidate_ids=cand_ids,
                candidate_features=[pmat[[pindex[p] for p in ids]] for ids in cand_ids],
                tags=tags,
                positive_index=[0] * len(exs),
            )
        )
    if short:
        logger.warning("%d queries have fewer than %s hard negatives; using what is available",
                       short, config.hard_negatives_per_query)
    return batches


def _row_scores(u: np.ndarray, v: np.ndarray, kind: str):
    """Scores of one query embedding against candidate embeddings, plus cached norms."""
    raw = v @ u
    if kind == "dot":
        return raw, None
    un = np.linalg.norm(u)
    vn = np.linalg.norm(v, axis=1)
    denom = un * vn
    s = np.zeros_like(raw)
    np.divide(raw, denom, out=s, where=denom > 0)
    return np.clip(s, -1.0, 1.0), (un, vn, denom)


def _score_backward(g: np.ndarray, u: np.ndarray, v: np.ndarray, s: np.ndarray, cache, kind: str):
    """Pull score gradients back to the query embedding and candidate embeddings."""
    if kind == "dot":
        return g @ v, np.outer(g, u)
    un, vn, denom = cache
    ok = denom > 0
    coef = np.where(ok, g / np.where(ok, denom, 1.0), 0.0)
    # d s_j / d u = v_j / (|u||v_j|) - s_j u / |u|^2
    gu = coef @ v
    if un > 0:
        gu = gu - (g[ok] @ s[ok]) * u / un**2
    # d s_j / d v_j = u / (|u||v_j|) - s_j v_j / |v_j|^2
    inv_vn2 = np.where(vn > 0, 1.0 / np.where(vn > 0, vn, 1.0) ** 2, 0.0)
    gv = np.outer(coef, u) - (g * s * inv_vn2)[:, None] * v
    return gu, gv


def forward_rows(params: EncoderParams, batch: Batch) -> list[ScoreRow]:
    qe = batch.query_features @ params.query_matrix.T
    rows = []
    for i, feats in enumerate(batch.candidate_features):
        s, _ = _row_scores(qe[i], feats @ params.passage_matrix.T, params.sim_kind)
        rows.append(ScoreRow(params.scale * s, batch.positive_index[i]))
    return rows


def _mean_breakdown(parts: list[LossBreakdown], beta: float) -> LossBreakdown:
    n = float(np.mean([p.nce for p in parts]))
    c = float(np.mean([p.ccr for p in parts]))
    return LossBreakdown(nce=n, ccr=c, rcl=float(np.mean([p.rcl for p in parts])), beta=beta)


def batch_loss(params: EncoderParams, batch: Batch, beta: float, ccr_in_batch: bool = True) -> LossBreakdown:
    masks = batch.ccr_masks(ccr_in_batch)
    rows = forward_rows(params, batch)
    return _mean_breakdown([rcl(r, beta, m) for r, m in zip(rows, masks)], beta)


def backward(params: EncoderParams, batch: Batch, beta: float, ccr_in_batch: bool = True):
    """Batch-mean RCL and its gradient with respect to both towers."""
    kind = params.sim_kind
    wq, wp = params.query_matrix, params.passage_matrix
    gq = np.zeros_like(wq)
    gp = np.zeros_like(wp)
    masks = batch.ccr_masks(ccr_in_batch)
    qe = batch.query_features @ wq.T
    parts = []
    n = len(batch.query_ids)
    for i, feats in enumerate(batch.candidate_features):
        u = qe[i]
        v = feats @ wp.T
        s, cache = _row_scores(u, v, kind)
        row = ScoreRow(params.scale * s, batch.positive_index[i])
        part = rcl(row, beta, masks[i])
        if not np.isfinite(part.rcl):
            raise TrainingDiverged(f"non-finite loss for query {batch.query_ids[i]!r}")
        parts.append(part)
        g = params.scale * rcl_gradient(row, beta, masks[i])
        gu, gv = _score_backward(g, u, v, s, cache, kind)
        gq += np.outer(gu, batch.query_features[i])
        gp += gv.T @ feats
    gq /= n
    gp /= n
    if params.tied:
        total = gq + gp
        grads = Gradients(total, total)
    else:
        grads = Gradients(gq, gp)
    return grads, _mean_breakdown(parts, beta)


def sgd_step(params: EncoderParams, grads: Gradients, lr: float, state: Optional[OptimizerState] = None) -> None:
    """In-place update M <- M - lr * grad."""
    params.query_matrix -= lr * grads.query_matrix
    if not params.tied:
        params.passage_matrix -= lr * grads.passage_matrix
    if state is not None:
        state.step += 1
        state.last_gradients = grads


ProgressSink = Callable[[dict], None]


def train(
    params: EncoderParams,
    dataset: Dataset,
    config: TrainConfig,
    progress_sink: Optional[ProgressSink] = None,
) -> TrainResult:
    """Run ``config.epochs`` epochs of SGD on the RCL objective.

    The input params are not modified; the towers are trained under
    ``config.sim_kind``. Each epoch emits one record with the row-weighted
    mean nce/ccr/rcl observed before each step.
    """
    model = params.with_sim(config.sim_kind).copy()
    state = OptimizerState()
    trace = []
    for epoch in range(config.epochs):
        totals = np.zeros(3)
        rows = 0
        for batch in build_batches(dataset, config, epoch):
            grads, loss = backward(model, batch, config.beta, config.ccr_in_batch)
            b = len(batch.query_ids)
            totals += b * np.array([loss.nce, loss.ccr, loss.rcl])
            rows += b
            if abs(loss.rcl) > DIVERGENCE_LIMIT:
                raise TrainingDiverged(f"mean |rcl| {abs(loss.rcl):.3g} exceeds {DIVERGENCE_LIMIT:g} in epoch {epoch}")
            sgd_step(model, grads, config.learning_rate, state)
        nce, ccr_, rcl_ = totals / rows
        record = {"epoch": epoch, "mean_nce": nce, "mean_ccr": ccr_, "mean_rcl": rcl_}
        trace.append(record)
        if progress_sink is not None:
            progress_sink(record)
    return TrainResult(model, trace)


def mean_loss(params: EncoderParams, dataset: Dataset, config: TrainConfig) -> LossBreakdown:
    """Row-weighted loss over the whole dataset, batched as in epoch 0."""
    parts = []
    for batch in build_batches(dataset, config, 0):
        loss = batch_loss(params.with_sim(config.sim_kind), batch, config.beta, config.ccr_in_batch)
        parts.extend([loss] * len(batch.query_ids))
    return _mean_breakdown(parts, config.beta)
