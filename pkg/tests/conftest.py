"""Shared builders for small hand-constructed instances."""

import numpy as np
import pytest

from zsdet.model import Model, init_model
from zsdet.semantics import EmbeddingTable, build_label_space, finalize_embeddings
from zsdet.train import TrainConfig


def make_table(vectors, labels=None):
    """Finalized table from raw column vectors (d, C)."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if labels is None:
        labels = tuple(f"c{i}" for i in range(1, vectors.shape[1] + 1))
    return finalize_embeddings(EmbeddingTable(labels=tuple(labels), vectors=vectors))


def make_space(n_seen, n_unseen, meta_of=None, n_meta=None, labels=None):
    """Label space over c1..cN; default meta assignment is round-robin."""
    n = n_seen + n_unseen
    if labels is None:
        labels = [f"c{i}" for i in range(1, n + 1)]
    if meta_of is None:
        n_meta = n_meta or min(3, n)
        meta_of = {labels[i]: f"m{(i % n_meta) + 1}" for i in range(n)}
    return build_label_space(labels[:n_seen], labels[n_seen:], meta_of)


def make_model(table, space, d_f=None, seed=0, config=None) -> Model:
    config = config or TrainConfig()
    return init_model(config, table, space, d_f=d_f or table.d, seed=seed)


def random_unit_columns(rng, d, n):
    v = rng.standard_normal((d, n))
    return v / np.linalg.norm(v, axis=0)


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
