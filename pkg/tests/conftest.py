import numpy as np
import pytest

from spanrewrite.corpus import TokenSeq, build_vocab, tokenize
from spanrewrite.synth import synthetic_corpus

from helpers import ELON


@pytest.fixture(scope="session")
def sentences():
    return synthetic_corpus(1200, seed=7)


@pytest.fixture(scope="session")
def vocab(sentences):
    return build_vocab(sentences, max_size=500)


@pytest.fixture(scope="session")
def windows(sentences, vocab):
    return [TokenSeq(tokenize(s, vocab).ids, f"d{i:07d}") for i, s in enumerate(sentences)]


@pytest.fixture(scope="session")
def elon_vocab():
    return build_vocab([ELON, "2001 joined a manufacturer"], max_size=200)


@pytest.fixture(scope="session")
def elon_seq(elon_vocab):
    return tokenize(ELON, elon_vocab, doc_id="elon")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)



ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
