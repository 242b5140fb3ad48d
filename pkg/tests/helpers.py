import numpy as np

from rclsieve.data import Dataset, Example


def toy_dataset(n_queries=6, dim=5, hard=2, seed=0, separable=False) -> Dataset:
    """Random vector dataset; each query owns one positive and ``hard`` negatives."""
    rng = np.random.default_rng(seed)
    corpus = {}
    examples = []
    for i in range(n_queries):
        q = rng.normal(size=dim)
        corpus[f"p{i}"] = q.copy() if separable else rng.normal(size=dim)
        negs = []
        for j in range(hard):
            corpus[f"n{i}-{j}"] = rng.normal(size=dim)
            negs.append(f"n{i}-{j}")
        examples.append(Example(f"q{i}", q, f"p{i}", negs))
    return Dataset(examples, corpus)
