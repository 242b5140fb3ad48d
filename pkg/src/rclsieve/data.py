"""In-memory training tuples (query, positive, negatives) and their corpus."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Literal

import numpy as np

Mode = Literal["vector", "text"]


class DatasetError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass
class Example:
    query_id: str
    query: np.ndarray | str
    positive_id: str
    negative_ids: list[str] = field(default_factory=list)
    # passages counted as hits at evaluation time; defaults to the positive
    relevant_ids: list[str] | None = None

    def relevant(self) -> set[str]:
        return set(self.relevant_ids) if self.relevant_ids else {self.positive_id}


@dataclass
class Dataset:
    examples: list[Example]
    corpus: dict[str, np.ndarray | str]
    mode: Mode = "vector"

    def __post_init__(self):
        if self.mode == "vector":
            self.corpus = {pid: np.asarray(v, dtype=np.float64) for pid, v in self.corpus.items()}
            for ex in self.examples:
                ex.query = np.asarray(ex.query, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.examples)

    def validate(self) -> None:
        """Referential integrity, unique ids and a single vector dimension."""
        seen = set()
        for i, ex in enumerate(self.examples):
            if ex.query_id in seen:
                raise DatasetError(f"duplicate query_id {ex.query_id!r}", i)
            seen.add(ex.query_id)
            for pid in [ex.positive_id, *ex.negative_ids, *(ex.relevant_ids or [])]:
                if pid not in self.corpus:
                    raise DatasetError(f"query {ex.query_id!r} references unknown passage {pid!r}", i)
        if self.mode == "vector":
            dim = self.feature_dim
            for pid, v in self.corpus.items():
                if v.shape != (dim,):
                    raise DatasetError(f"passage {pid!r} has shape {v.shape}, expected ({dim},)")
                if not np.all(np.isfinite(v)):
                    raise DatasetError(f"passage {pid!r} has non-finite entries")
            for i, ex in enumerate(self.examples):
                if ex.query.shape != (dim,):
                    raise DatasetError(f"query {ex.query_id!r} has shape {ex.query.shape}, expected ({dim},)", i)

    @property
    def feature_dim(self) -> int:
        if self.mode != "vector":
            raise DatasetError("text-mode dataset has no feature dimension; run ingest first")
        first = next(iter(self.corpus.values()), None)
        if first is None:
            raise DatasetError("empty corpus")
        return first.shape[0]

    @cached_property
    def passage_ids(self) -> list[str]:
        return list(self.corpus)

    @cached_property
    def passage_index(self) -> dict[str, int]:
        return {pid: i for i, pid in enumerate(self.passage_ids)}

    @cached_property
    def passage_matrix(self) -> np.ndarray:
        self.feature_dim  # raises for text mode
        return np.stack([self.corpus[pid] for pid in self.passage_ids])

    @cached_property
    def query_matrix(self) -> np.ndarray:
        return np.stack([ex.query for ex in self.examples])

    def with_negatives(self, negatives: dict[str, list[str]]) -> "Dataset":
        """Copy with each listed query's negatives replaced; corpus shared."""
        examples = [
            replace(ex, negative_ids=list(negatives.get(ex.query_id, ex.negative_ids))) for ex in self.examples
        ]
        return Dataset(examples, self.corpus, self.mode)

    def subset(self, query_ids) -> "Dataset":
        keep = set(query_ids)
        return Dataset([ex for ex in self.examples if ex.query_id in keep], self.corpus, self.mode)
