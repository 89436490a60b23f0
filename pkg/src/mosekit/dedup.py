"""MinHash LSH near-deduplication over character 5-gram shingles."""

from __future__ import annotations

import hashlib
import struct
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .datagen import Snippet, Triplet

N_PERM = 256
THRESHOLD = 0.7
BANDS = 32
ROWS = 8

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


@dataclass(frozen=True)
class MinHashSignature:
    values: np.ndarray  # uint64, shape (n_perm,)
    n_perm: int
    seed: int


def shingle(text: str, k: int = 5) -> set[str]:
    if k < 1:
        raise ValueError("k must be >= 1")
    return {text[i:i + k] for i in range(len(text) - k + 1)}


def jaccard(a: set, b: set) -> float:
    union = a | b
    return len(a & b) / len(union) if union else 1.0


def _hash64(items: Sequence[str]) -> np.ndarray:
    return np.array(
        [int.from_bytes(hashlib.blake2b(s.encode("utf-8"), digest_size=8).digest(), "little")
         for s in items],
        dtype=np.uint64,
    )


def _permutations(n_perm: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 2**63, size=n_perm, dtype=np.uint64) * np.uint64(2) + np.uint64(1)
    b = rng.integers(0, 2**63, size=n_perm, dtype=np.uint64) * np.uint64(2) + rng.integers(0, 2, size=n_perm, dtype=np.uint64)
    return a, b


def _mix(x: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer: a bijection on 64-bit words, so a*x+b followed by
    # _mix is still a permutation of the 64-bit space.
    x = x ^ (x >> np.uint64(30))
    x = x * np.uint64(0xBF58476D1CE4E5B9)
    x = x ^ (x >> np.uint64(27))
    x = x * np.uint64(0x94D049BB133111EB)
    return x ^ (x >> np.uint64(31))


def minhash(s: set[str], n_perm: int = N_PERM, seed: int = 1) -> MinHashSignature:
    if not s:
        raise ValueError("cannot MinHash an empty shingle set")
    x = _hash64(sorted(s))
    a, b = _permutations(n_perm, seed)
    with np.errstate(over="ignore"):
        h = _mix(a[:, None] * x[None, :] + b[:, None])
    return MinHashSignature(h.min(axis=1), n_perm, seed)


def est_jaccard(a: MinHashSignature, b: MinHashSignature) -> float:
    if a.n_perm != b.n_perm or a.seed != b.seed:
        raise ValueError(f"signature mismatch: n_perm {a.n_perm}/{b.n_perm}, seed {a.seed}/{b.seed}")
    return float(np.mean(a.values == b.values))


class _UnionFind:
    def __init__(self, items):
        self.parent = {x: x for x in items}

    def find(self, x):
        while self.parent[x] != x:
            self.parent[x] = self.parent[self.parent[x]]
            x = self.parent[x]
        return x

    def union(self, x, y):
        rx, ry = self.find(x), self.find(y)
        if rx != ry:
            # root is always the smaller id, which is the one we keep
            lo, hi = sorted((rx, ry))
            self.parent[hi] = lo


def candidate_pairs(sigs: dict[str, MinHashSignature], bands: int = BANDS,
                    rows: int = ROWS) -> set[tuple[str, str]]:
    buckets: dict[tuple[int, bytes], list[str]] = defaultdict(list)
    for key in sorted(sigs):
        v = sigs[key].values
        if len(v) < bands * rows:
            raise ValueError(f"{bands}x{rows} bands need {bands * rows} permutations, got {len(v)}")
        for band in range(bands):
            buckets[(band, v[band * rows:(band + 1) * rows].tobytes())].append(key)
    pairs = set()
    for members in buckets.values():
        for i in range(len(members)):
            for j in range(i + 1, len(members)):
                pairs.add((members[i], members[j]))
    return pairs


def duplicate_pairs(texts: dict[str, str], threshold: float = THRESHOLD, n_perm: int = N_PERM,
                    seed: int = 1, bands: int = BANDS, rows: int = ROWS) -> list[tuple[str, str]]:
    """Verified near-duplicate pairs (a < b) among ``texts``."""
    if not 0.0 < threshold <= 1.0:
        raise ValueError("threshold must be in (0, 1]")
    sigs = {}
    short: dict[str, list[str]] = defaultdict(list)
    for key, text in texts.items():
        sh = shingle(text)
        if sh:
            sigs[key] = minhash(sh, n_perm, seed)
        else:
            # too short to shingle: only exact copies count as duplicates
            short[text].append(key)
    found = [p for p in candidate_pairs(sigs, bands, rows)
             if est_jaccard(sigs[p[0]], sigs[p[1]]) >= threshold]
    for keys in short.values():
        keys = sorted(keys)
        found.extend((keys[0], k) for k in keys[1:])
    return sorted(found)


def lsh_dedup(snippets: Sequence[Snippet], threshold: float = THRESHOLD, n_perm: int = N_PERM,
              seed: int = 1) -> tuple[list[Snippet], list[tuple[str, str]]]:
    """Drop near-duplicates; each cluster keeps its lexicographically smallest id.

    Returns ``(kept, removed)`` where ``removed`` holds ``(removed_id, kept_id)``.
    """
    texts = {s.id: s.text for s in snippets}
    uf = _UnionFind(texts)
    for a, b in duplicate_pairs(texts, threshold, n_perm, seed):
        uf.union(a, b)
    kept = [s for s in snippets if uf.find(s.id) == s.id]
    removed = sorted((s.id, uf.find(s.id)) for s in snippets if uf.find(s.id) != s.id)
    return kept, removed


def dedup_triplets(triplets: Sequence[Triplet], threshold: float = THRESHOLD, n_perm: int = N_PERM,
                   seed: int = 1) -> tuple[list[Triplet], list[tuple[str, str]]]:
    """Drop a triplet when either code column near-duplicates an earlier triplet's."""
    order = {t.id: i for i, t in enumerate(triplets)}
    first_match: dict[str, str] = {}
    for column in ("code_a", "code_b"):
        texts = {t.id: getattr(t, column).text for t in triplets}
        for a, b in duplicate_pairs(texts, threshold, n_perm, seed):
            early, late = sorted((a, b), key=order.__getitem__)
            prev = first_match.get(late)
            if prev is None or order[early] < order[prev]:
                first_match[late] = early
    kept = [t for t in triplets if t.id not in first_match]
    removed = sorted(first_match.items())
    return kept, removed


# --- signature cache ---------------------------------------------------------

_MAGIC = b"MHSG"
_ID_WIDTH = 64


def save_signatures(path: str | Path, sigs: dict[str, MinHashSignature]) -> None:
    if not sigs:
        n_perm, seed = N_PERM, 0
    else:
        first = next(iter(sigs.values()))
        n_perm, seed = first.n_perm, first.seed
    with open(path, "wb") as f:
        f.write(_MAGIC + struct.pack("<IQI", n_perm, seed, len(sigs)))
        for key in sorted(sigs):
            sig = sigs[key]
            if sig.n_perm != n_perm or sig.seed != seed:
                raise ValueError("all signatures in one cache must share n_perm and seed")
            raw = key.encode("utf-8")
            if len(raw) > _ID_WIDTH:
                raise ValueError(f"id longer than {_ID_WIDTH} bytes: {key!r}")
            f.write(raw.ljust(_ID_WIDTH, b"\0"))
            f.write(sig.values.astype("<u8").tobytes())


def load_signatures(path: str | Path) -> dict[str, MinHashSignature]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != _MAGIC:
        raise ValueError("not a signature cache")
    n_perm, seed, count = struct.unpack_from("<IQI", data, 4)
    off = 4 + struct.calcsize("<IQI")
    out = {}
    for _ in range(count):
        key = data[off:off + _ID_WIDTH].rstrip(b"\0").decode("utf-8")
        off += _ID_WIDTH
        values = np.frombuffer(data, dtype="<u8", count=n_perm, offset=off).astype(np.uint64)
        off += 8 * n_perm
        out[key] = MinHashSignature(values, n_perm, seed)
    return out
