"""Featurization, linear encoder towers and similarity scoring."""

from __future__ import annotations

import hashlib
import logging
import re
from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from rclsieve.losses import ScoreRow

logger = logging.getLogger(__name__)

SimKind = Literal["dot", "cosine"]
SIM_KINDS = ("dot", "cosine")

_TOKEN_RE = re.compile(r"[^\W_]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def token_bucket(token: str, feature_dim: int, seed: int) -> tuple[int, float]:
    """Bucket index and sign for one token.

    The first 8 bytes of blake2b(f"{seed}:{token}") are read as a
    little-endian uint64 ``h``; bucket is ``h % feature_dim`` and the sign
    is taken from bit 63.
    """
    digest = hashlib.blake2b(f"{seed}:{token}".encode("utf-8"), digest_size=8).digest()
    h = int.from_bytes(digest, "little")
    sign = -1.0 if (h >> 63) & 1 else 1.0
    return h % feature_dim, sign


def featurize(text: str, feature_dim: int, seed: int = 0, normalize: bool = True) -> np.ndarray:
    """Signed hashed bag of tokens, L2-normalized unless all-zero."""
    if feature_dim < 1:
        raise ValueError(f"feature_dim must be >= 1, got {feature_dim}")
    x = np.zeros(feature_dim, dtype=np.float64)
    for tok in tokenize(text):
        idx, sign = token_bucket(tok, feature_dim, seed)
        x[idx] += sign
    if normalize:
        norm = np.linalg.norm(x)
        if norm > 0:
            x /= norm
    return x


@dataclass
class EncoderParams:
    """Two linear towers (embed_dim x feature_dim) and the similarity kind.

    With ``tied=True`` both attributes reference the same array. Training
    and sieve scores are ``scale * sim(q, p)``; under cosine the scale acts
    as an inverse temperature and keeps scores bounded by ``scale``.
    """

    query_matrix: np.ndarray
    passage_matrix: np.ndarray
    tied: bool = False
    sim_kind: SimKind = "cosine"
    scale: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be finite and > 0, got {self.scale}")
        self.query_matrix = np.asarray(self.query_matrix, dtype=np.float64)
        if self.tied:
            self.passage_matrix = self.query_matrix
        else:
            self.passage_matrix = np.asarray(self.passage_matrix, dtype=np.float64)
        if self.sim_kind not in SIM_KINDS:
            raise ValueError(f"unknown sim_kind {self.sim_kind!r}")
        if self.query_matrix.ndim != 2 or self.query_matrix.shape != self.passage_matrix.shape:
            raise ValueError(
                f"tower shapes disagree: {self.query_matrix.shape} vs {self.passage_matrix.shape}"
            )
        if not (np.all(np.isfinite(self.query_matrix)) and np.all(np.isfinite(self.passage_matrix))):
            raise ValueError("encoder matrices must be finite")

    @property
    def embed_dim(self) -> int:
        return self.query_matrix.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.query_matrix.shape[1]

    def tower(self, which: str) -> np.ndarray:
        if which == "query":
            return self.query_matrix
        if which == "passage":
            return self.passage_matrix
        raise ValueError(f"unknown tower {which!r}")

    def copy(self) -> "EncoderParams":
        q = self.query_matrix.copy()
        p = q if self.tied else self.passage_matrix.copy()
        return EncoderParams(q, p, tied=self.tied, sim_kind=self.sim_kind, scale=self.scale)

    def with_sim(self, sim_kind: SimKind) -> "EncoderParams":
        """Same matrices (shared, not copied) under another similarity."""
        return EncoderParams(self.query_matrix, self.passage_matrix, tied=self.tied, sim_kind=sim_kind,
                             scale=self.scale)


def identity_params(dim: int, sim_kind: SimKind = "cosine", tied: bool = False, scale: float = 1.0) -> EncoderParams:
    """Encoder that passes features through unchanged.

    This is the precomputed-embedding mode: features are treated as
    embeddings produced elsewhere.
    """
    eye = np.eye(dim)
    return EncoderParams(eye, eye if tied else eye.copy(), tied=tied, sim_kind=sim_kind, scale=scale)


def random_params(
    feature_dim: int,
    embed_dim: int,
    seed: int,
    sim_kind: SimKind = "cosine",
    tied: bool = False,
    init_std: float | None = None,
    scale: float = 1.0,
) -> EncoderParams:
    rng = np.random.default_rng(seed)
    std = 1.0 / np.sqrt(feature_dim) if init_std is None else init_std
    q = rng.normal(scale=std, size=(embed_dim, feature_dim))
    p = q if tied else rng.normal(scale=std, size=(embed_dim, feature_dim))
    return EncoderParams(q, p, tied=tied, sim_kind=sim_kind, scale=scale)


def encode(params: EncoderParams, x, tower: str) -> np.ndarray:
    """Apply one tower to a feature vector or a stack of feature rows."""
    x = np.asarray(x, dtype=np.float64)
    m = params.tower(tower)
    if x.shape[-1] != m.shape[1]:
        raise ValueError(f"feature length {x.shape[-1]} != feature_dim {m.shape[1]}")
    return x @ m.T


def similarity(u, v, kind: SimKind) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"length mismatch: {u.shape} vs {v.shape}")
    dot = float(u @ v)
    if kind == "dot":
        return dot
    if kind != "cosine":
        raise ValueError(f"unknown similarity kind {kind!r}")
    denom = float(np.linalg.norm(u) * np.linalg.norm(v))
    if denom == 0.0:
        # zero embedding carries no evidence; defined as 0 rather than NaN
        logger.debug("cosine similarity with zero-norm operand, returning 0")
        return 0.0
    return min(1.0, max(-1.0, dot / denom))


def similarity_matrix(queries: np.ndarray, passages: np.ndarray, kind: SimKind) -> np.ndarray:
    """All-pairs similarity between embedding rows (n_q x n_p)."""
    s = queries @ passages.T
    if kind == "dot":
        return s
    qn = np.linalg.norm(queries, axis=1)
    pn = np.linalg.norm(passages, axis=1)
    denom = np.outer(qn, pn)
    out = np.zeros_like(s)
    np.divide(s, denom, out=out, where=denom > 0)
    return np.clip(out, -1.0, 1.0)


def score_batch(
    params: EncoderParams,
    queries: Sequence,
    candidates: Sequence[Sequence],
    positive_indices: Sequence[int] | None = None,
) -> list[ScoreRow]:
    """One ScoreRow per query: ``params.scale * sim`` in candidate order."""
    if len(queries) != len(candidates):
        raise ValueError(f"{len(queries)} queries but {len(candidates)} candidate lists")
    if positive_indices is None:
        positive_indices = [0] * len(queries)
    rows = []
    for q, cands, pos in zip(queries, candidates, positive_indices):
        if len(cands) < 2:
            raise ValueError("each query needs at least 2 candidates")
        qe = encode(params, q, "query")[None, :]
        pe = encode(params, np.asarray(cands, dtype=np.float64), "passage")
        scores = params.scale * similarity_matrix(qe, pe, params.sim_kind)[0]
        rows.append(ScoreRow(scores, int(pos)))
    return rows
