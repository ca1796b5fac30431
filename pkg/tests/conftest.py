from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from xtrap.dataio import EmbeddingSet, Query, QuerySet

FIXTURES = Path(__file__).parent / "fixtures"


def make_embeddings(ids, matrix) -> EmbeddingSet:
    return EmbeddingSet(list(ids), np.asarray(matrix, dtype=np.float32))


def random_embeddings(rng, prefix: str, count: int, dim: int, scale: float = 1.0) -> EmbeddingSet:
    ids = [f"{prefix}{i:04d}" for i in range(count)]
    return make_embeddings(ids, rng.normal(scale=scale, size=(count, dim)))


def make_queries(ids, texts=None) -> QuerySet:
    if texts is None:
        texts = [f"text of {qid}" for qid in ids]
    return QuerySet([Query(qid, text) for qid, text in zip(ids, texts)])


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
