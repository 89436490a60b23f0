import numpy as np
import pytest
import torch

from mosekit.datagen import gen_corpus, gen_triplets
from mosekit.model import EncoderConfig, init
from mosekit.packing import RepoIndex
from mosekit.tokenizer import build_vocab

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def corpus():
    return gen_corpus(3, 6, 5, ["toyA", "toyB", "toyC"])


@pytest.fixture(scope="session")
def triplets():
    return gen_triplets(5, 24, ["toyA", "toyB", "toyC", "toyD"])


@pytest.fixture(scope="session")
def vocab(corpus, triplets):
    texts = [s.text for s in corpus] + [x for t in triplets for x in (t.nl, t.code_a.text, t.code_b.text)]
    return build_vocab(texts, 1024)


@pytest.fixture(scope="session")
def index(corpus, vocab):
    return RepoIndex(corpus, vocab)


def small_config(vocab_size, **kw):
    base = dict(vocab_size=vocab_size, depth=4, exits=(1, 2, 4), hidden=16, n_heads=4, n_kv_heads=2,
                intermediate=32, max_seq=64, proj_dim=8)
    base.update(kw)
    return EncoderConfig(**base)


@pytest.fixture
def small_ckpt(vocab):
    return init(small_config(len(vocab)), seed=0, dtype=torch.float64, vocab=vocab)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(n: int, name: str, ok: bool, detail: str = "") -> None:
    line = f"criterion {n:>2} {'PASS' if ok else 'FAIL'}  {name}  {detail}".rstrip()
    ACCEPTANCE_LINES[n] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
