"""Synthetic false-negative laboratory.

Generates clustered retrieval data with known relevance, plants false
negatives, sweeps the regularizer weight and checks the robustness
theorems by exhaustive enumeration on tiny instances.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from rclsieve.data import Dataset, Example
from rclsieve.losses import ScoreRow, nce_terms
from rclsieve.model import EncoderParams, identity_params, similarity_matrix
from rclsieve.retrieval import evaluate
from rclsieve.sieve import refine_and_sieve
from rclsieve.trainer import TrainConfig, train

logger = logging.getLogger(__name__)

GROUPS = ("planted_false_negative", "true_hard_negative", "in_batch_negative", "positive")


@dataclass
class SyntheticSpec:
    num_queries: int = 200
    feature_dim: int = 32
    relevant_per_query: int = 2
    hard_negatives_per_query: int = 8
    cluster_noise_scale: float = 0.3
    noise_rate: float = 0.3
    seed: int = 7
    # latent layout: topic block + aspect block; remaining feature dims are nuisance
    topic_dim: int = 6
    aspect_dim: int = 6
    aspect_weight: float = 0.5
    nuisance_scale: float = 1.5
    distractors: int = 200
    test_queries: int = 200

    def __post_init__(self):
        if self.relevant_per_query < 2:
            raise ValueError("relevant_per_query must be >= 2 to have a passage to plant")
        if not 0 <= self.noise_rate < 1:
            raise ValueError("noise_rate must be in [0, 1)")
        if self.cluster_noise_scale <= 0:
            raise ValueError("cluster_noise_scale must be > 0")
        if self.topic_dim < 1 or self.aspect_dim < 0 or self.topic_dim + self.aspect_dim > self.feature_dim:
            raise ValueError("topic_dim + aspect_dim must fit in feature_dim")

    @property
    def signal_dim(self) -> int:
        return self.topic_dim + self.aspect_dim


@dataclass
class SyntheticData:
    """Clean training tuples, a held-out query split, and ground-truth relevance.

    Both splits share one corpus. ``relevance`` maps every query id (train
    and test) to its generated relevant passage ids.
    """

    train: Dataset
    test: Dataset
    relevance: dict[str, set[str]]


def generate_synthetic(spec: SyntheticSpec) -> SyntheticData:
    """Clustered queries and passages with a known relevance map.

    A query's latent center is a unit topic vector followed by a unit aspect
    vector scaled by ``aspect_weight``. Relevant passages jitter the whole
    center with Gaussian noise of norm about ``cluster_noise_scale``. Hard
    negatives keep the jittered topic but draw a fresh aspect, so they sit
    close to the query yet are separable by a learned encoder. Distractors
    have fresh centers. Latents are embedded through a random orthonormal
    basis; the orthogonal complement carries isotropic nuisance of norm
    about ``nuisance_scale``.
    """
    rng = np.random.default_rng(spec.seed)
    d, r = spec.feature_dim, spec.signal_dim
    basis, _ = np.linalg.qr(rng.normal(size=(d, d)))
    sig, nui = basis[:, :r], basis[:, r:]

    def unit(n, dim):
        if dim == 0:
            return np.zeros((n, 0))
        x = rng.normal(size=(n, dim))
        return x / np.linalg.norm(x, axis=1, keepdims=True)

    def centers(n):
        return np.hstack([unit(n, spec.topic_dim), spec.aspect_weight * unit(n, spec.aspect_dim)])

    def features(latent):
        out = latent @ sig.T
        if d > r:
            out = out + spec.nuisance_scale * (rng.normal(size=(latent.shape[0], d - r)) / np.sqrt(d - r)) @ nui.T
        return out

    def jitter(center, n):
        return center[None, :] + spec.cluster_noise_scale * rng.normal(size=(n, r)) / np.sqrt(r)

    corpus: dict[str, np.ndarray] = {}
    relevance: dict[str, set[str]] = {}
    splits = {"train": [], "test": []}
    total = spec.num_queries + spec.test_queries
    all_centers = centers(total)
    for qi in range(total):
        qid = f"q{qi:05d}"
        c = all_centers[qi]
        qx = features(c[None, :])[0]
        rel = features(jitter(c, spec.relevant_per_query))
        hard_latent = jitter(c, spec.hard_negatives_per_query)
        hard_latent[:, spec.topic_dim:] = spec.aspect_weight * unit(spec.hard_negatives_per_query, spec.aspect_dim)
        hard = features(hard_latent)
        rel_ids = [f"{qid}-rel{j}" for j in range(spec.relevant_per_query)]
        hard_ids = [f"{qid}-hn{j}" for j in range(spec.hard_negatives_per_query)]
        corpus.update(zip(rel_ids, rel))
        corpus.update(zip(hard_ids, hard))
        relevance[qid] = set(rel_ids)
        split = "train" if qi < spec.num_queries else "test"
        splits[split].append(Example(qid, qx, rel_ids[0], list(hard_ids), relevant_ids=list(rel_ids)))
    if spec.distractors:
        dx = features(centers(spec.distractors))
        corpus.update((f"d{j:05d}", v) for j, v in enumerate(dx))
    return SyntheticData(Dataset(splits["train"], corpus), Dataset(splits["test"], corpus), relevance)


def inject_false_negatives(
    dataset: Dataset, relevance: dict[str, set[str]], rate: float, seed: int
) -> tuple[Dataset, dict[str, str]]:
    """Plant one unannotated relevant passage among the negatives of a ``rate`` fraction of queries.

    Selection is a seeded Bernoulli draw per query; the planted passage is
    inserted at a uniformly random position. The positive stays positive.
    Returns the noisy dataset and the ledger query_id -> planted passage id.
    """
    if not 0 <= rate <= 1:
        raise ValueError("rate must be in [0, 1]")
    rng = np.random.default_rng(seed)
    ledger: dict[str, str] = {}
    negatives = {}
    for ex in dataset.examples:
        hit = rng.random() < rate
        candidates = sorted(relevance.get(ex.query_id, set()) - {ex.positive_id} - set(ex.negative_ids))
        if not hit:
            continue
        if not candidates:
            raise ValueError(f"query {ex.query_id!r} has no unannotated relevant passage to plant")
        planted = candidates[rng.integers(len(candidates))]
        negs = list(ex.negative_ids)
        negs.insert(int(rng.integers(len(negs) + 1)), planted)
        negatives[ex.query_id] = negs
        ledger[ex.query_id] = planted
    return dataset.with_negatives(negatives), ledger


def separation_auc(planted_losses: Sequence[float], true_losses: Sequence[float]) -> float:
    """P(planted loss < true-negative loss), ties counted half (Mann-Whitney)."""
    a = np.asarray(planted_losses, dtype=np.float64)
    b = np.asarray(true_losses, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("separation AUC needs at least one planted and one true negative loss")
    ranks = rankdata(np.concatenate([a, b]))
    u_b = ranks[a.size :].sum() - b.size * (b.size + 1) / 2.0
    return float(u_b / (a.size * b.size))


@dataclass
class SimulationReport:
    beta: float
    losses: dict[str, list[float]]
    separation_auc: float
    trace: list[dict] = field(default_factory=list)

    def summary(self) -> dict:
        out = {"beta": self.beta, "separation_auc": self.separation_auc}
        for g in GROUPS:
            v = np.asarray(self.losses.get(g, []))
            out[f"{g}_mean"] = float(v.mean()) if v.size else None
            out[f"{g}_count"] = int(v.size)
        return out

    def histogram(self, bins: int = 30) -> dict:
        allv = np.concatenate([np.asarray(v) for v in self.losses.values() if len(v)])
        edges = np.histogram_bin_edges(allv, bins=bins)
        return {
            "beta": self.beta,
            "bin_edges": edges.tolist(),
            "counts": {g: np.histogram(self.losses[g], bins=edges)[0].tolist() for g in GROUPS if g in self.losses},
        }


def group_losses(
    params: EncoderParams,
    dataset: Dataset,
    ledger: dict[str, str],
    in_batch: int = 8,
    seed: int = 0,
) -> dict[str, list[float]]:
    """General NCE loss of every candidate, grouped by its ground-truth role.

    Each query's row holds its positive, its (noisy) negatives and
    ``in_batch`` positives of other queries chosen with a fixed seed, all
    scored with the model's scaled cosine similarity.
    """
    rng = np.random.default_rng(seed)
    pindex = dataset.passage_index
    pemb = dataset.passage_matrix @ params.passage_matrix.T
    qemb = dataset.query_matrix @ params.query_matrix.T
    positives = [ex.positive_id for ex in dataset.examples]
    out = {g: [] for g in GROUPS}
    n = len(dataset.examples)
    for qi, ex in enumerate(dataset.examples):
        others = [positives[j] for j in rng.choice(n, size=min(in_batch + 1, n), replace=False) if j != qi][:in_batch]
        ids = [ex.positive_id, *ex.negative_ids, *others]
        s = params.scale * similarity_matrix(qemb[qi][None, :], pemb[[pindex[p] for p in ids]], "cosine")[0]
        losses = nce_terms(ScoreRow(s, 0))
        planted = ledger.get(ex.query_id)
        out["positive"].append(float(losses[0]))
        for pid, l in zip(ex.negative_ids, losses[1 : 1 + len(ex.negative_ids)]):
            out["planted_false_negative" if pid == planted else "true_hard_negative"].append(float(l))
        out["in_batch_negative"].extend(float(l) for l in losses[1 + len(ex.negative_ids) :])
    return out


def run_beta_sweep(
    dataset: Dataset,
    ledger: dict[str, str],
    betas: Sequence[float],
    config: TrainConfig,
    base_params: EncoderParams,
) -> list[SimulationReport]:
    """Refine the same pretrained model once per beta and measure group separation."""
    if not ledger:
        raise ValueError("empty ledger: separation AUC is undefined without planted false negatives")
    reports = []
    for beta in betas:
        cfg = TrainConfig(**{**config.__dict__, "beta": beta})
        result = train(base_params, dataset, cfg)
        losses = group_losses(result.params, dataset, ledger, seed=config.seed)
        auc = separation_auc(losses["planted_false_negative"], losses["true_hard_negative"])
        reports.append(SimulationReport(beta, losses, auc, result.trace))
    return reports


@dataclass
class NoiseTransition:
    """Per-positive-pair probability that a relevant pair keeps its positive label.

    Negatives are never flipped (no false positives), so only the
    positive-side retention T11(X) is stored.
    """

    retention: Sequence[float]

    def __post_init__(self):
        self.retention = np.asarray(self.retention, dtype=np.float64)
        if self.retention.size == 0:
            raise ValueError("retention needs at least one positive pair")
        if np.any(self.retention <= 0.5) or np.any(self.retention > 1):
            raise ValueError("retention must lie in (0.5, 1]: a noisy pair must be rarer than a clean one")

    @property
    def mean_retention(self) -> float:
        return float(self.retention.mean())

    @property
    def deviation(self) -> np.ndarray:
        return self.retention - self.mean_retention

    @property
    def beta_interval(self) -> tuple[float, float]:
        """(max deviation, min retention): the regularizer weights that provably keep the clean minimizer."""
        return float(self.deviation.max()), float(self.retention.min())


@dataclass
class GridInstance:
    """Tiny retrieval problem whose parameters are passage angles on a circle.

    Query embeddings are fixed unit vectors at ``query_angles`` (radians);
    every passage is a unit 2-D vector whose angle ranges over
    ``grid_size`` equally spaced values. ``rows[i]`` lists query i's
    candidate passages and the position of its positive among them.
    Scores are ``scale * cos``.
    """

    query_angles: Sequence[float]
    rows: Sequence[tuple[Sequence[int], int]]
    num_passages: int
    grid_size: int = 12
    scale: float = 2.0

    @property
    def num_points(self) -> int:
        return self.grid_size**self.num_passages


def constructed_instance() -> GridInstance:
    """Two queries 60 degrees apart; each one's positive is the other's negative."""
    return GridInstance(
        query_angles=(np.deg2rad(60.0), np.deg2rad(120.0)),
        rows=(((0, 1), 0), ((1, 0), 0)),
        num_passages=2,
        grid_size=12,
        scale=2.0,
    )


MAX_GRID_POINTS = 10**6


def grid_risks(instance: GridInstance, transition: NoiseTransition):
    """Exact risks at every grid point, uniform weight per (query, passage) pair.

    Returns (clean, noisy, regularizer): the clean positive-pair NCE risk,
    the noisy risk where each positive pair counts with its retention
    probability (a flipped pair carries zero loss), and the mean general NCE
    loss over all pairs.
    """
    if instance.num_points > MAX_GRID_POINTS:
        raise ValueError(f"grid has {instance.num_points} points, limit is {MAX_GRID_POINTS}")
    if len(transition.retention) != len(instance.rows):
        raise ValueError("need one retention probability per query row")
    angles = np.arange(instance.grid_size) * 2 * np.pi / instance.grid_size
    points = np.array(list(itertools.product(range(instance.grid_size), repeat=instance.num_passages)))
    theta = angles[points]
    clean = np.zeros(len(points))
    noisy = np.zeros(len(points))
    reg = np.zeros(len(points))
    pairs = 0
    for (cands, pos), keep, qa in zip(instance.rows, transition.retention, instance.query_angles):
        s = instance.scale * np.cos(theta[:, list(cands)] - qa)
        m = s.max(axis=1, keepdims=True)
        losses = m + np.log(np.exp(s - m).sum(axis=1, keepdims=True)) - s
        clean += losses[:, pos]
        noisy += keep * losses[:, pos]
        reg += losses.sum(axis=1)
        pairs += len(cands)
    return clean / pairs, noisy / pairs, reg / pairs


def _argmin_set(v: np.ndarray, rtol: float = 1e-9) -> frozenset:
    lo = v.min()
    return frozenset(np.flatnonzero(v <= lo + rtol * (1.0 + abs(lo))).tolist())


def theorem_grid_check(instance: GridInstance, transition: NoiseTransition, betas: Sequence[float]) -> list[float]:
    """Betas for which the noisy regularized risk has the clean risk's minimizers.

    For each beta, ``noisy - beta * regularizer`` is evaluated on the whole
    grid and its argmin set compared to the argmin set of the clean risk.
    """
    clean, noisy, reg = grid_risks(instance, transition)
    target = _argmin_set(clean)
    return [float(b) for b in betas if _argmin_set(noisy - b * reg) == target]


@dataclass
class LabConfig:
    """Training settings of the synthetic experiments.

    Models start from identity towers with cosine scores multiplied by
    ``scale``. ``warmup_epochs`` of plain NCE produce the shared pretrained
    model; each beta of a sweep then continues for ``sweep_epochs``.
    """

    scale: float = 20.0
    learning_rate: float = 0.5
    batch_size: int = 16
    warmup_epochs: int = 10
    sweep_epochs: int = 10
    # denoising benchmark: epochs of each full training run and of the sieve refinement
    train_epochs: int = 20
    sieve_epochs: int = 3
    sieve_beta: float = 0.5

    def train_config(self, beta: float, epochs: int, seed: int) -> TrainConfig:
        return TrainConfig(beta=beta, learning_rate=self.learning_rate, epochs=epochs,
                           batch_size=self.batch_size, sim_kind="cosine", seed=seed)


@dataclass
class Simulation:
    spec: SyntheticSpec
    data: SyntheticData
    noisy: Dataset
    ledger: dict[str, str]
    base_params: EncoderParams
    reports: list[SimulationReport]


def simulate(spec: SyntheticSpec, betas: Sequence[float] = (0.0, 0.05, 0.1, 0.5),
             lab: Optional[LabConfig] = None) -> Simulation:
    """Generate, plant false negatives, warm up with plain NCE, then sweep beta."""
    lab = lab or LabConfig()
    data = generate_synthetic(spec)
    noisy, ledger = inject_false_negatives(data.train, data.relevance, spec.noise_rate, spec.seed + 1)
    init = identity_params(spec.feature_dim, scale=lab.scale)
    base = train(init, noisy, lab.train_config(0.0, lab.warmup_epochs, spec.seed)).params
    reports = run_beta_sweep(noisy, ledger, betas, lab.train_config(0.0, lab.sweep_epochs, spec.seed), base)
    return Simulation(spec, data, noisy, ledger, base, reports)


@dataclass
class DenoisingResult:
    baseline_recall: dict[int, float]
    sieved_recall: dict[int, float]
    planted: int
    planted_dropped: int
    sieve_out_rate: float


def run_denoising_benchmark(spec: SyntheticSpec, lab: Optional[LabConfig] = None,
                            ks: Sequence[int] = (5, 20, 100)) -> DenoisingResult:
    """Plain NCE on the noisy data versus plain NCE on its sieved version.

    The sieve model is the noisy baseline refined with RCL for
    ``lab.sieve_epochs``; both final models are evaluated on the held-out
    queries.
    """
    lab = lab or LabConfig()
    data = generate_synthetic(spec)
    noisy, ledger = inject_false_negatives(data.train, data.relevance, spec.noise_rate, spec.seed + 1)
    init = identity_params(spec.feature_dim, scale=lab.scale)
    cfg = lab.train_config(0.0, lab.train_epochs, spec.seed)
    baseline = train(init, noisy, cfg).params
    sieved, report, _ = refine_and_sieve(baseline, noisy, lab.train_config(lab.sieve_beta, lab.sieve_epochs, spec.seed))
    retrained = train(init, sieved, cfg).params
    dropped = {q.query_id: set(q.dropped_ids) for q in report.queries}
    return DenoisingResult(
        baseline_recall=evaluate(baseline, data.test, ks=ks, mrr_ks=()).recall_at,
        sieved_recall=evaluate(retrained, data.test, ks=ks, mrr_ks=()).recall_at,
        planted=len(ledger),
        planted_dropped=sum(1 for q, p in ledger.items() if p in dropped.get(q, ())),
        sieve_out_rate=report.sieve_out_rate,
    )
