"""Regenerate the committed test fixtures.

    python scripts/make_fixtures.py

Writes tests/fixtures/golden.ckpt (a small checkpoint with known matrices)
and tests/fixtures/synthetic_50.json (summary statistics of a small
synthetic dataset, computed here with plain numpy).
"""

import json
from pathlib import Path

import numpy as np

from rclsieve.model import EncoderParams
from rclsieve.noiselab import SyntheticSpec, generate_synthetic
from rclsieve.storage import save_checkpoint

FIXTURES = Path(__file__).resolve().parents[1] / "tests" / "fixtures"

# exactly representable in float32
GOLDEN_QUERY = [[1.0, -2.0, 0.5], [0.25, 3.0, -0.125]]
GOLDEN_PASSAGE = [[-1.5, 0.0, 2.0], [4.0, -0.75, 1.0]]


def golden_params() -> EncoderParams:
    return EncoderParams(np.array(GOLDEN_QUERY), np.array(GOLDEN_PASSAGE), sim_kind="cosine", scale=20.0)


def cos_rows(a, b):
    return (a * b).sum(axis=1) / (np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))


def synthetic_stats(spec: SyntheticSpec) -> dict:
    data = generate_synthetic(spec)
    ds = data.train
    q = np.stack([e.query for e in ds.examples])
    rel = {"positive": [], "relevant": [], "hard": []}
    for e in ds.examples:
        rel["positive"].append(ds.corpus[e.positive_id])
        rel["relevant"].append(ds.corpus[e.relevant_ids[1]])
    hard = np.stack([ds.corpus[p] for e in ds.examples for p in e.negative_ids])
    qh = np.repeat(q, spec.hard_negatives_per_query, axis=0)
    return {
        "spec": {"num_queries": spec.num_queries, "feature_dim": spec.feature_dim,
                 "relevant_per_query": spec.relevant_per_query,
                 "hard_negatives_per_query": spec.hard_negatives_per_query, "seed": spec.seed},
        "num_train": len(ds.examples),
        "num_test": len(data.test.examples),
        "corpus_size": len(ds.corpus),
        "first_query_id": ds.examples[0].query_id,
        "first_negatives": ds.examples[0].negative_ids,
        "mean_cos_positive": float(cos_rows(q, np.stack(rel["positive"])).mean()),
        "mean_cos_relevant": float(cos_rows(q, np.stack(rel["relevant"])).mean()),
        "mean_cos_hard": float(cos_rows(qh, hard).mean()),
        "mean_query_norm": float(np.linalg.norm(q, axis=1).mean()),
        "first_query_head": ds.examples[0].query[:4].tolist(),
    }


def main():
    FIXTURES.mkdir(parents=True, exist_ok=True)
    save_checkpoint(golden_params(), FIXTURES / "golden.ckpt")
    stats = synthetic_stats(SyntheticSpec(num_queries=50, seed=7))
    (FIXTURES / "synthetic_50.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    print(json.dumps(stats, indent=2))


if __name__ == "__main__":
    main()
