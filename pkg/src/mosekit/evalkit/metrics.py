"""Ranking metrics over explicit ranked candidate lists."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Hashable, Sequence


@dataclass(frozen=True)
class RankedList:
    query_id: Hashable
    candidates: tuple
    relevant: frozenset

    def __post_init__(self):
        object.__setattr__(self, "candidates", tuple(self.candidates))
        object.__setattr__(self, "relevant", frozenset(self.relevant))
        if len(set(self.candidates)) != len(self.candidates):
            raise ValueError(f"duplicate candidates for query {self.query_id!r}")
        if not self.relevant <= set(self.candidates):
            raise ValueError(f"relevant items missing from candidates for query {self.query_id!r}")

    def relevant_ranks(self) -> list[int]:
        """1-based ranks of the relevant items, ascending."""
        return [i + 1 for i, c in enumerate(self.candidates) if c in self.relevant]


def _mean(xs: Sequence[float]) -> float:
    return sum(xs) / len(xs) if xs else 0.0


def _need_relevant(lst: RankedList) -> list[int]:
    ranks = lst.relevant_ranks()
    if not ranks:
        raise ValueError(f"query {lst.query_id!r} has no relevant item")
    return ranks


def mrr(lists: Sequence[RankedList]) -> float:
    return _mean([1.0 / _need_relevant(l)[0] for l in lists])


def ndcg_binary(lists: Sequence[RankedList]) -> float:
    """Binary-gain NDCG over the full list; 1/log2(rank+1) with one relevant item."""
    scores = []
    for l in lists:
        ranks = _need_relevant(l)
        dcg = sum(1.0 / math.log2(r + 1) for r in ranks)
        idcg = sum(1.0 / math.log2(r + 1) for r in range(1, len(ranks) + 1))
        scores.append(dcg / idcg)
    return _mean(scores)


def average_precision(lst: RankedList) -> float:
    ranks = _need_relevant(lst)
    return sum((k + 1) / r for k, r in enumerate(ranks)) / len(ranks)


def map_multi(lists: Sequence[RankedList]) -> float:
    return _mean([average_precision(l) for l in lists])


def recall_at_k(lists: Sequence[RankedList], k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    return _mean([sum(1 for r in _need_relevant(l) if r <= k) / len(l.relevant) for l in lists])
