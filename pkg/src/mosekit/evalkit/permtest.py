"""Two-sample permutation test on the absolute difference of means."""

from __future__ import annotations

from typing import Sequence

import numpy as np


def permutation_test(scores_a: Sequence[float], scores_b: Sequence[float], n_perm: int = 10_000,
                     alpha: float = 0.05, seed: int = 0) -> tuple[float, bool]:
    """Return ``(p, p < alpha)`` with ``p = (1 + #{perm stat >= observed}) / (n_perm + 1)``.

    The pooled sample is sorted and the smaller group is the one resampled, so
    swapping ``a`` and ``b`` gives exactly the same p-value.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("both samples must be non-empty")
    small, large = (a, b) if a.size <= b.size else (b, a)
    pooled = np.sort(np.concatenate([a, b]))
    n1, total = small.size, pooled.size
    total_sum = pooled.sum()

    def stat(sum1):
        return np.abs(sum1 / n1 - (total_sum - sum1) / (total - n1))

    observed = stat(small.sum())
    rng = np.random.default_rng(seed)
    hits = 0
    chunk = max(1, 2_000_000 // total)
    done = 0
    while done < n_perm:
        m = min(chunk, n_perm - done)
        perms = rng.permuted(np.broadcast_to(pooled, (m, total)), axis=1)
        # tolerance guards ties that differ only by summation order
        hits += int(np.sum(stat(perms[:, :n1].sum(axis=1)) >= observed - 1e-12))
        done += m
    p = (1 + hits) / (n_perm + 1)
    return p, bool(p < alpha)
