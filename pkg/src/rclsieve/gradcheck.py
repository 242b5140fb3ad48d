"""Central finite-difference checks of the analytic RCL gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from rclsieve.losses import ScoreRow, rcl, rcl_gradient
from rclsieve.model import EncoderParams
from rclsieve.trainer import HARD_NEGATIVE, IN_BATCH_NEGATIVE, POSITIVE, Batch, backward, batch_loss

SCORE_TOL = 1e-6
PARAM_TOL = 1e-5
STEP = 1e-5


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm error scaled by the larger max-norm of the two gradients."""
    a = np.asarray(analytic, dtype=np.float64)
    b = np.asarray(numeric, dtype=np.float64)
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-300)
    return float(np.max(np.abs(a - b)) / denom)


def fd_score_gradient(row: ScoreRow, beta: float, h: float = STEP, mask=None) -> np.ndarray:
    g = np.zeros(row.k)
    for j in range(row.k):
        up = row.scores.copy()
        dn = row.scores.copy()
        up[j] += h
        dn[j] -= h
        g[j] = (rcl(ScoreRow(up, row.positive_index), beta, mask).rcl
                - rcl(ScoreRow(dn, row.positive_index), beta, mask).rcl) / (2 * h)
    return g


def fd_param_gradient(params: EncoderParams, batch: Batch, beta: float, h: float = STEP,
                      ccr_in_batch: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Numerical gradient of the batch-mean RCL w.r.t. each tower (the shared matrix once if tied)."""
    mats = [params.query_matrix] if params.tied else [params.query_matrix, params.passage_matrix]
    out = []
    for m in mats:
        g = np.zeros_like(m)
        for idx in np.ndindex(m.shape):
            old = m[idx]
            m[idx] = old + h
            up = batch_loss(params, batch, beta, ccr_in_batch).rcl
            m[idx] = old - h
            dn = batch_loss(params, batch, beta, ccr_in_batch).rcl
            m[idx] = old
            g[idx] = (up - dn) / (2 * h)
        out.append(g)
    return (out[0], out[0]) if params.tied else (out[0], out[1])


def random_batch(rng: np.random.Generator, feature_dim: int, queries: int, hard: int) -> Batch:
    """Random features laid out as positive + hard negatives + other queries' positives."""
    qf = rng.normal(size=(queries, feature_dim))
    pos = rng.normal(size=(queries, feature_dim))
    cands, tags, ids = [], [], []
    for i in range(queries):
        hn = rng.normal(size=(hard, feature_dim))
        others = [j for j in range(queries) if j != i]
        cands.append(np.vstack([pos[i:i + 1], hn, pos[others]]))
        tags.append([POSITIVE] + [HARD_NEGATIVE] * hard + [IN_BATCH_NEGATIVE] * len(others))
        ids.append([f"p{i}"] + [f"h{i}-{k}" for k in range(hard)] + [f"p{j}" for j in others])
    return Batch([f"q{i}" for i in range(queries)], qf, ids, cands, tags, [0] * queries)


@dataclass
class GradcheckResult:
    score_errors: list[float]
    param_errors: list[float]

    @property
    def max_score_error(self) -> float:
        return max(self.score_errors, default=0.0)

    @property
    def max_param_error(self) -> float:
        return max(self.param_errors, default=0.0)

    @property
    def ok(self) -> bool:
        return self.max_score_error <= SCORE_TOL and self.max_param_error <= PARAM_TOL


def score_level_errors(n: int = 100, seed: int = 0, ks=(2, 4, 16, 64)) -> list[float]:
    rng = np.random.default_rng(seed)
    errs = []
    for i in range(n):
        k = ks[i % len(ks)]
        row = ScoreRow(rng.normal(scale=2.0, size=k), int(rng.integers(k)))
        beta = float(rng.uniform(0, 1))
        mask = None if i % 3 else rng.random(k) < 0.7
        if mask is not None and not mask.any():
            mask[0] = True
        errs.append(relative_error(rcl_gradient(row, beta, mask), fd_score_gradient(row, beta, mask=mask)))
    return errs


def param_level_errors(n: int = 100, seed: int = 0, max_dim: int = 8) -> list[float]:
    rng = np.random.default_rng(seed)
    errs = []
    for i in range(n):
        fdim = int(rng.integers(2, max_dim + 1))
        edim = int(rng.integers(2, max_dim + 1))
        kind = ("dot", "cosine")[i % 2]
        tied = i % 4 >= 2
        if tied:
            edim = fdim if rng.random() < 0.5 else edim
        q = rng.normal(size=(edim, fdim)) / np.sqrt(fdim)
        p = q if tied else rng.normal(size=(edim, fdim)) / np.sqrt(fdim)
        params = EncoderParams(q, p, tied=tied, sim_kind=kind, scale=float(rng.choice([1.0, 4.0])))
        batch = random_batch(rng, fdim, int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        beta = float(rng.uniform(0, 1))
        ccr_in_batch = bool(i % 5)
        grads, _ = backward(params, batch, beta, ccr_in_batch)
        gq, gp = fd_param_gradient(params, batch, beta, ccr_in_batch=ccr_in_batch)
        if tied:
            errs.append(relative_error(grads.query_matrix, gq))
        else:
            errs.append(relative_error(np.concatenate([grads.query_matrix.ravel(), grads.passage_matrix.ravel()]),
                                       np.concatenate([gq.ravel(), gp.ravel()])))
    return errs


def run_gradcheck(n: int = 100, seed: int = 0) -> GradcheckResult:
    return GradcheckResult(score_level_errors(n, seed), param_level_errors(n, seed))
