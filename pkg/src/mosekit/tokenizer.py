"""Word-level vocabulary with fixed special-token ids."""

from __future__ import annotations

import json
import re
from collections import Counter
from pathlib import Path
from typing import Iterable, Sequence

PAD, UNK, MASK, SEP, CLS = "[PAD]", "[UNK]", "[MASK]", "[SEP]", "[CLS]"
SPECIALS = (PAD, UNK, MASK, SEP, CLS)
PAD_ID, UNK_ID, MASK_ID, SEP_ID, CLS_ID = range(5)
N_SPECIAL = len(SPECIALS)

_WORD = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    return _WORD.findall(text)


def normalize(text: str) -> str:
    return " ".join(tokenize(text))


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        if tuple(tokens[:N_SPECIAL]) != SPECIALS:
            raise ValueError(f"vocab must start with {SPECIALS}")
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocab")

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.itos, ensure_ascii=False), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))


def build_vocab(texts: Iterable, max_size: int) -> Vocab:
    """Rank words by frequency, ties broken lexicographically.

    ``texts`` may hold strings or objects with a ``text`` attribute (snippets).
    """
    if max_size < N_SPECIAL + 1:
        raise ValueError(f"max_size must be >= {N_SPECIAL + 1}")
    counts: Counter[str] = Counter()
    for t in texts:
        counts.update(tokenize(t if isinstance(t, str) else t.text))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return Vocab(list(SPECIALS) + [w for w, _ in ranked[: max_size - N_SPECIAL]])


def encode(v: Vocab, text: str) -> list[int]:
    # "[CLS]" typed in text tokenizes to "[", "CLS", "]": only UNK among the
    # specials can come out of here
    return [v.stoi.get(w, UNK_ID) for w in tokenize(text)]


def decode(v: Vocab, ids: Iterable[int]) -> str:
    out = []
    for i in ids:
        i = int(i)
        if not 0 <= i < len(v):
            raise ValueError(f"token id {i} out of range for vocab of size {len(v)}")
        out.append(v.itos[i])
    return " ".join(out)
