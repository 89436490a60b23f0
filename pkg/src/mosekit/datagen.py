"""Synthetic, repository-structured corpora and NL/code/code triplets.

Everything here is a pure function of its arguments: each call seeds its own
``random.Random`` so corpora are byte-identical across runs and threads.
"""

from __future__ import annotations

import json
import random
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

# Size of the real SynthCoNL release; documentation only.
FULL_SCALE_TRIPLET_COUNT = 1_071_367

GLOBAL_POOL_SIZE = 512
REPO_POOL_SIZE = 16

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


@dataclass(frozen=True)
class Snippet:
    id: str
    repo_id: str
    lang: str
    text: str


@dataclass(frozen=True)
class Code:
    text: str
    lang: str


@dataclass(frozen=True)
class Triplet:
    id: str
    nl: str
    code_a: Code
    code_b: Code


@dataclass(frozen=True)
class ProgramSpec:
    """Abstract program rendered identically-in-meaning into every toy language."""

    kind: str
    names: tuple[str, ...]
    literals: tuple[int, ...]

    def statements(self) -> list[tuple]:
        return _KINDS[self.kind].statements(self.names, self.literals)

    def describe(self) -> str:
        return _KINDS[self.kind].describe(self.names, self.literals)


@dataclass(frozen=True)
class _Kind:
    n_names: int
    n_literals: int
    statements: callable = field(repr=False)
    describe: callable = field(repr=False)


# Statement tuples: ("assign", var, lit) | ("arith", dst, lhs, op, rhs)
# | ("loop", count, body_stmt) | ("print", var)
_KINDS: dict[str, _Kind] = {
    "accumulate": _Kind(
        2, 3,
        lambda n, l: [("assign", n[0], l[0]), ("assign", n[1], l[1]),
                      ("loop", l[2], ("arith", n[0], n[0], "+", n[1])), ("print", n[0])],
        lambda n, l: (f"set {n[0]} to {l[0]} and {n[1]} to {l[1]} , then add {n[1]} "
                      f"to {n[0]} {l[2]} times and print {n[0]}"),
    ),
    "scale": _Kind(
        1, 3,
        lambda n, l: [("assign", n[0], l[0]),
                      ("loop", l[1], ("arith", n[0], n[0], "*", l[2])), ("print", n[0])],
        lambda n, l: f"start {n[0]} at {l[0]} and multiply it by {l[2]} {l[1]} times , then print {n[0]}",
    ),
    "difference": _Kind(
        3, 2,
        lambda n, l: [("assign", n[0], l[0]), ("assign", n[1], l[1]),
                      ("arith", n[2], n[0], "-", n[1]), ("print", n[2])],
        lambda n, l: f"compute {n[2]} as {n[0]} minus {n[1]} where {n[0]} is {l[0]} and {n[1]} is {l[1]}",
    ),
    "countdown": _Kind(
        1, 2,
        lambda n, l: [("assign", n[0], l[0]),
                      ("loop", l[1], ("arith", n[0], n[0], "-", 1)), ("print", n[0])],
        lambda n, l: f"count {n[0]} down from {l[0]} by one , {l[1]} times , and print it",
    ),
    "product": _Kind(
        3, 2,
        lambda n, l: [("assign", n[0], l[0]), ("assign", n[1], l[1]),
                      ("arith", n[2], n[0], "*", n[1]), ("arith", n[2], n[2], "+", n[0]),
                      ("print", n[2])],
        lambda n, l: (f"multiply {n[0]} = {l[0]} with {n[1]} = {l[1]} into {n[2]} , "
                      f"add {n[0]} to {n[2]} and print {n[2]}"),
    ),
}

KINDS = tuple(_KINDS)


def _render_toy_a(stmt) -> str:
    op = stmt[0]
    if op == "assign":
        return f"{stmt[1]} = {stmt[2]}"
    if op == "arith":
        return f"{stmt[1]} = {stmt[2]} {stmt[3]} {stmt[4]}"
    if op == "loop":
        return f"for _ in range ( {stmt[1]} ) :\n    {_render_toy_a(stmt[2])}"
    return f"print ( {stmt[1]} )"


def _render_toy_b(stmt) -> str:
    op = stmt[0]
    if op == "assign":
        return f"int {stmt[1]} = {stmt[2]} ;"
    if op == "arith":
        return f"{stmt[1]} = {stmt[2]} {stmt[3]} {stmt[4]} ;"
    if op == "loop":
        return f"repeat ( {stmt[1]} ) {{ {_render_toy_b(stmt[2])} }}"
    return f"puts ( {stmt[1]} ) ;"


def _render_toy_c(stmt) -> str:
    op = stmt[0]
    if op == "assign":
        return f"( let {stmt[1]} {stmt[2]} )"
    if op == "arith":
        return f"( set {stmt[1]} ( {stmt[3]} {stmt[2]} {stmt[4]} ) )"
    if op == "loop":
        return f"( times {stmt[1]} {_render_toy_c(stmt[2])} )"
    return f"( show {stmt[1]} )"


def _render_toy_d(stmt) -> str:
    op = stmt[0]
    if op == "assign":
        return f"LET {stmt[1]} := {stmt[2]}"
    if op == "arith":
        return f"{stmt[1]} := {stmt[2]} {stmt[3]} {stmt[4]}"
    if op == "loop":
        return f"DO {stmt[1]} TIMES\n  {_render_toy_d(stmt[2])}\nEND"
    return f"WRITE {stmt[1]}"


RENDERERS = {
    "toyA": _render_toy_a,
    "toyB": _render_toy_b,
    "toyC": _render_toy_c,
    "toyD": _render_toy_d,
}
LANGS = tuple(RENDERERS)

# Words that appear in the toy grammars; never used as identifiers.
_RESERVED = {"for", "range", "print", "int", "repeat", "puts", "let", "set", "times",
             "show", "LET", "DO", "TIMES", "END", "WRITE"}


def render_program(spec: ProgramSpec, lang: str) -> str:
    try:
        render = RENDERERS[lang]
    except KeyError:
        raise ValueError(f"unsupported toy language {lang!r}; known: {', '.join(LANGS)}") from None
    return "\n".join(render(s) for s in spec.statements())


def global_identifier_pool(size: int = GLOBAL_POOL_SIZE) -> list[str]:
    rng = random.Random(0x5EED)
    seen: set[str] = set()
    pool = []
    while len(pool) < size:
        n_syl = rng.choice((2, 2, 3))
        name = "".join(rng.choice(_CONSONANTS) + rng.choice(_VOWELS) for _ in range(n_syl))
        if rng.random() < 0.5:
            name += rng.choice(_CONSONANTS)
        if name in seen or name in _RESERVED:
            continue
        seen.add(name)
        pool.append(name)
    return pool


def random_program(rng: random.Random, names: Sequence[str]) -> ProgramSpec:
    kind = rng.choice(KINDS)
    k = _KINDS[kind]
    chosen = tuple(rng.sample(list(names), k.n_names))
    literals = tuple(rng.randint(2, 99) for _ in range(k.n_literals))
    return ProgramSpec(kind, chosen, literals)


def gen_corpus(seed: int, n_repos: int, snippets_per_repo: int,
               langs: Sequence[str], programs_per_snippet: int = 2) -> list[Snippet]:
    """Build ``n_repos * snippets_per_repo`` snippets.

    Each repository draws a private pool of identifiers from the global pool, and
    every snippet in it uses only those names, so two snippets of one repo share
    vocabulary far more often than two snippets of different repos.
    """
    if not langs:
        raise ValueError("langs must be non-empty")
    for lang in langs:
        if lang not in RENDERERS:
            raise ValueError(f"unsupported toy language {lang!r}")
    if n_repos < 0:
        raise ValueError("n_repos must be >= 0")
    if n_repos > 0 and snippets_per_repo < 1:
        raise ValueError("snippets_per_repo must be >= 1")
    rng = random.Random(seed)
    pool = global_identifier_pool()
    out = []
    for r in range(n_repos):
        repo_id = f"repo{r:04d}"
        repo_names = rng.sample(pool, REPO_POOL_SIZE)
        for s in range(snippets_per_repo):
            lang = rng.choice(list(langs))
            blocks = [render_program(random_program(rng, repo_names), lang)
                      for _ in range(programs_per_snippet)]
            out.append(Snippet(f"{repo_id}-{s:04d}", repo_id, lang, "\n".join(blocks)))
    return out


def gen_triplets(seed: int, n: int, langs: Sequence[str]) -> list[Triplet]:
    if n < 0:
        raise ValueError("n must be >= 0")
    if len(set(langs)) < 2:
        raise ValueError("need at least two distinct languages")
    for lang in langs:
        if lang not in RENDERERS:
            raise ValueError(f"unsupported toy language {lang!r}")
    rng = random.Random(seed)
    pool = global_identifier_pool()
    langs = sorted(set(langs))
    seen: set[ProgramSpec] = set()
    out = []
    while len(out) < n:
        spec = random_program(rng, pool)
        if spec in seen:
            continue
        seen.add(spec)
        la, lb = rng.sample(langs, 2)
        out.append(Triplet(
            id=f"t{len(out):06d}",
            nl=spec.describe(),
            code_a=Code(render_program(spec, la), la),
            code_b=Code(render_program(spec, lb), lb),
        ))
    return out


def _identifiers(text: str, pool: set[str]) -> list[str]:
    return sorted({w for w in re.findall(r"[A-Za-z_]\w*", text) if w in pool})


def _shingles(text: str, k: int = 5) -> set[str]:
    return {text[i:i + k] for i in range(len(text) - k + 1)}


def _jaccard(a: set, b: set) -> float:
    union = a | b
    return len(a & b) / len(union) if union else 1.0


def _rename(text: str, old: str, new: str) -> str:
    return re.sub(rf"\b{re.escape(old)}\b", new, text)


def plant_near_duplicates(corpus: Sequence[Snippet], rate: float, seed: int,
                          min_jaccard: float = 0.7) -> tuple[list[Snippet], list[tuple[str, str]]]:
    """Append renamed copies of ``round(rate * len(corpus))`` snippets.

    A copy renames one identifier to a same-length name differing only in its
    last character, and is accepted only if its exact character 5-gram Jaccard
    with the original stays >= ``min_jaccard``.
    Returns the extended corpus and the (original_id, copy_id) ground truth.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must be in [0, 1]")
    rng = random.Random(seed)
    n_copies = round(rate * len(corpus))
    if n_copies == 0:
        return list(corpus), []
    pool = set(global_identifier_pool())
    order = list(range(len(corpus)))
    rng.shuffle(order)
    copies, truth = [], []
    for idx in order:
        if len(copies) == n_copies:
            break
        orig = corpus[idx]
        base = _shingles(orig.text)
        idents = _identifiers(orig.text, pool)
        rng.shuffle(idents)
        for old in idents:
            words = set(re.findall(r"\w+", orig.text))
            candidates = [old[:-1] + c for c in _CONSONANTS + _VOWELS
                          if old[:-1] + c != old and old[:-1] + c not in words]
            new = rng.choice(candidates)
            text = _rename(orig.text, old, new)
            if _jaccard(base, _shingles(text)) >= min_jaccard:
                copy = Snippet(f"{orig.id}-dup{len(copies):03d}", orig.repo_id, orig.lang, text)
                copies.append(copy)
                truth.append((orig.id, copy.id))
                break
    if len(copies) < n_copies:
        raise ValueError(f"could only plant {len(copies)} of {n_copies} near-duplicates")
    return list(corpus) + copies, truth


def mean_pool_overlap(corpus: Sequence[Snippet]) -> tuple[float, float]:
    """Mean identifier-set Jaccard for same-repo and cross-repo snippet pairs."""
    pool = set(global_identifier_pool())
    ids = [set(_identifiers(s.text, pool)) for s in corpus]
    same, cross = [], []
    for i in range(len(corpus)):
        for j in range(i + 1, len(corpus)):
            (same if corpus[i].repo_id == corpus[j].repo_id else cross).append(_jaccard(ids[i], ids[j]))
    avg = lambda xs: sum(xs) / len(xs) if xs else 0.0  # noqa: E731
    return avg(same), avg(cross)


# --- JSON-lines I/O ---------------------------------------------------------

def _to_record(obj) -> dict:
    return asdict(obj)


def snippet_from_record(rec: dict) -> Snippet:
    return Snippet(rec["id"], rec["repo_id"], rec["lang"], rec["text"])


def triplet_from_record(rec: dict) -> Triplet:
    return Triplet(rec["id"], rec["nl"], Code(**rec["code_a"]), Code(**rec["code_b"]))


def write_jsonl(path: str | Path, records: Iterable) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in records:
            rec = r if isinstance(r, dict) else _to_record(r)
            f.write(json.dumps(rec, ensure_ascii=False, sort_keys=False) + "\n")


def read_jsonl(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]


def load_snippets(path: str | Path) -> list[Snippet]:
    return [snippet_from_record(r) for r in read_jsonl(path)]


def load_triplets(path: str | Path) -> list[Triplet]:
    return [triplet_from_record(r) for r in read_jsonl(path)]
