"""Exact cosine-similarity search."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np


@dataclass(frozen=True)
class EmbeddingIndex:
    ids: list  # ascending
    matrix: np.ndarray  # (N, D), unit-norm rows in ``ids`` order


def build_index(embeddings: Mapping, atol: float = 1e-4) -> EmbeddingIndex:
    ids = sorted(embeddings)
    if not ids:
        return EmbeddingIndex([], np.zeros((0, 0)))
    mat = np.stack([np.asarray(embeddings[i], dtype=np.float64) for i in ids])
    norms = np.linalg.norm(mat, axis=1)
    if not np.allclose(norms, 1.0, atol=atol):
        raise ValueError("index vectors must be unit-norm")
    return EmbeddingIndex(ids, mat)


def scores(index: EmbeddingIndex, query) -> np.ndarray:
    return index.matrix @ np.asarray(query, dtype=np.float64)


def search(index: EmbeddingIndex, query, k: int) -> list:
    """Top-``k`` ids by cosine; equal scores fall back to ascending id."""
    if not index.ids:
        return []
    s = scores(index, query)
    # ids are stored ascending, so a stable sort on -score breaks ties by id
    order = np.argsort(-s, kind="stable")
    return [index.ids[i] for i in order[:k]]
