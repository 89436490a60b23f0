"""Model inputs: left-padded, [SEP]-separated segments with a trailing [CLS].

Layout of every packed example::

    [PAD] ... [PAD] [SEP] s1 [SEP] s2 ... [CLS]

Padding sits on the left so the [CLS] read-out is always the last position.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .datagen import Snippet
from .tokenizer import CLS_ID, MASK_ID, N_SPECIAL, PAD_ID, SEP_ID, Vocab, encode

SAME_REPO, CROSS_REPO = "same_repo", "cross_repo"
NEXT, RANDOM = "next", "random"


@dataclass
class PackedExample:
    ids: np.ndarray
    valid_mask: np.ndarray
    cls_pos: int
    seg_bounds: list[tuple[int, int]]
    mlm_targets: list[tuple[int, int]] = field(default_factory=list)
    icc_label: Optional[str] = None
    nsp_label: Optional[str] = None
    pair_label: Optional[int] = None

    @property
    def binary_target(self) -> Optional[float]:
        """1.0 for same-repo / next / clone, 0.0 for the negative class."""
        if self.icc_label is not None:
            return float(self.icc_label == SAME_REPO)
        if self.nsp_label is not None:
            return float(self.nsp_label == NEXT)
        if self.pair_label is not None:
            return float(self.pair_label)
        return None

    def to_record(self) -> dict:
        return {
            "ids": self.ids.tolist(),
            "valid_mask": self.valid_mask.tolist(),
            "cls_pos": self.cls_pos,
            "seg_bounds": [list(b) for b in self.seg_bounds],
            "mlm_targets": [list(t) for t in self.mlm_targets],
            "icc_label": self.icc_label,
            "nsp_label": self.nsp_label,
            "pair_label": self.pair_label,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "PackedExample":
        return cls(
            ids=np.asarray(rec["ids"], dtype=np.int64),
            valid_mask=np.asarray(rec["valid_mask"], dtype=bool),
            cls_pos=int(rec["cls_pos"]),
            seg_bounds=[tuple(b) for b in rec["seg_bounds"]],
            mlm_targets=[tuple(t) for t in rec["mlm_targets"]],
            icc_label=rec.get("icc_label"),
            nsp_label=rec.get("nsp_label"),
            pair_label=rec.get("pair_label"),
        )


def write_packed(path: str | Path, examples: Iterable[PackedExample]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(json.dumps(ex.to_record()) + "\n")


def read_packed(path: str | Path) -> list[PackedExample]:
    with open(path, encoding="utf-8") as f:
        return [PackedExample.from_record(json.loads(line)) for line in f if line.strip()]


class RepoIndex:
    """Encoded snippets grouped by repository, in corpus order."""

    def __init__(self, corpus: Sequence[Snippet], vocab: Vocab):
        self.by_repo: dict[str, list[list[int]]] = {}
        self.snippet_ids: dict[str, list[str]] = {}
        for s in corpus:
            self.by_repo.setdefault(s.repo_id, []).append(encode(vocab, s.text))
            self.snippet_ids.setdefault(s.repo_id, []).append(s.id)
        self.repos = sorted(self.by_repo)
        self.flat = [(r, i) for r in self.repos for i in range(len(self.by_repo[r]))]
        if not self.repos:
            raise ValueError("empty corpus")

    def __len__(self) -> int:
        return len(self.flat)


def assemble(segments: Sequence[Sequence[int]], max_len: int) -> PackedExample:
    n_used = sum(len(s) + 1 for s in segments) + 1
    if n_used > max_len:
        raise ValueError(f"segments need {n_used} positions, max_len is {max_len}")
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    pos = max_len - n_used
    bounds = []
    for seg in segments:
        ids[pos] = SEP_ID
        pos += 1
        ids[pos:pos + len(seg)] = seg
        bounds.append((pos, pos + len(seg)))
        pos += len(seg)
    ids[pos] = CLS_ID
    valid = np.zeros(max_len, dtype=bool)
    valid[max_len - n_used:] = True
    return PackedExample(ids=ids, valid_mask=valid, cls_pos=max_len - 1, seg_bounds=bounds)


def pack_single(tokens: Sequence[int], max_len: int) -> PackedExample:
    return assemble([list(tokens)[: max_len - 2]], max_len)


def pack_icc(pool: RepoIndex, max_len: int, p_cross: float = 0.5,
             rng: np.random.Generator | None = None) -> PackedExample:
    """Greedily concatenate snippets of one repo; with prob ``p_cross`` swap one for a foreign one."""
    if max_len < 8:
        raise ValueError("max_len must be >= 8")
    rng = rng if rng is not None else np.random.default_rng()
    cross = bool(rng.random() < p_cross)
    if cross and len(pool.repos) < 2:
        raise ValueError("cross-repo packing needs at least two repositories")
    home = pool.repos[rng.integers(len(pool.repos))]
    snippets = pool.by_repo[home]
    budget = max_len - 1  # [CLS]

    items: list[list[int]] = []
    used = 0
    order = rng.permutation(len(snippets))
    k = 0
    while True:
        if k == len(order):
            order, k = rng.permutation(len(snippets)), 0
        toks = snippets[order[k]]
        k += 1
        if not items:
            # leave room for "[SEP] x" of a second snippet
            toks = toks[: budget - 3]
        elif len(items) == 1:
            toks = toks[: budget - used - 1]
        elif used + len(toks) + 1 > budget:
            break
        items.append(list(toks))
        used += len(toks) + 1
        if used + 2 > budget:
            break

    if cross:
        others = [r for r in pool.repos if r != home]
        foreign_repo = others[rng.integers(len(others))]
        fsnips = pool.by_repo[foreign_repo]
        j = int(rng.integers(len(items)))
        items[j] = list(fsnips[rng.integers(len(fsnips))])
        while sum(len(t) + 1 for t in items) > budget:
            if len(items) > 2:
                drop = max(i for i in range(len(items)) if i != j)
                items.pop(drop)
                if drop < j:
                    j -= 1
            else:
                longest = max(range(len(items)), key=lambda i: len(items[i]))
                items[longest].pop()
    ex = assemble(items, max_len)
    ex.icc_label = CROSS_REPO if cross else SAME_REPO
    return ex


def apply_mlm_mask(ex: PackedExample, vocab_size: int, rate: float = 0.15,
                   rng: np.random.Generator | None = None) -> PackedExample:
    """Select each maskable position with prob ``rate``; 80/10/10 mask/random/keep."""
    rng = rng if rng is not None else np.random.default_rng()
    ids = ex.ids.copy()
    maskable = ex.valid_mask & (ids >= N_SPECIAL)
    n = len(ids)
    selected = (rng.random(n) < rate) & maskable
    action = rng.random(n)
    random_ids = rng.integers(N_SPECIAL, vocab_size, size=n)
    positions = np.flatnonzero(selected)
    targets = [(int(p), int(ids[p])) for p in positions]
    to_mask = positions[action[positions] < 0.8]
    to_rand = positions[(action[positions] >= 0.8) & (action[positions] < 0.9)]
    ids[to_mask] = MASK_ID
    ids[to_rand] = random_ids[to_rand]
    return replace(ex, ids=ids, mlm_targets=targets)


def _truncate_pair(a: list[int], b: list[int], budget: int) -> tuple[list[int], list[int]]:
    a, b = list(a), list(b)
    turn = 0
    while len(a) + len(b) > budget:
        if (turn == 0 and len(a) > 1) or len(b) <= 1:
            a.pop()
        else:
            b.pop()
        turn ^= 1
    return a, b


def pack_pair(a: Sequence[int], b: Sequence[int], max_len: int,
              label: Optional[int] = None) -> PackedExample:
    """``[PAD]... [SEP] a [SEP] b [CLS]`` with alternating tail truncation."""
    if max_len < 5:
        raise ValueError("max_len must be >= 5")
    a, b = _truncate_pair(a, b, max_len - 3)
    ex = assemble([a, b], max_len)
    ex.pair_label = label
    return ex


def pack_nsp(pool: RepoIndex, max_len: int, p_random: float = 0.5,
             rng: np.random.Generator | None = None) -> PackedExample:
    """Pair a snippet with its successor in the same repo, or with a random snippet."""
    rng = rng if rng is not None else np.random.default_rng()
    eligible = [r for r in pool.repos if len(pool.by_repo[r]) >= 2]
    if not eligible:
        raise ValueError("NSP needs a repository with at least two snippets")
    repo = eligible[rng.integers(len(eligible))]
    snips = pool.by_repo[repo]
    i = int(rng.integers(len(snips) - 1))
    is_random = bool(rng.random() < p_random)
    if is_random:
        while True:
            r, k = pool.flat[rng.integers(len(pool.flat))]
            if not (r == repo and k == i + 1) or len(pool.flat) <= 2:
                break
        second = pool.by_repo[r][k]
    else:
        second = snips[i + 1]
    ex = pack_pair(snips[i], second, max_len)
    ex.nsp_label = RANDOM if is_random else NEXT
    return ex
