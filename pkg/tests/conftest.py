import numpy as np
import pytest

from fedlm.data import generate_corpus, partition_iid
from fedlm.model import ModelConfig

MICRO = ModelConfig(n_blocks=1, d_model=16, n_heads=2, expansion_ratio=2, vocab_size=64, seq_len=8)


@pytest.fixture
def micro_cfg():
    return MICRO


@pytest.fixture(scope="session")
def web_corpus():
    return generate_corpus("web", 20_000, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def micro_plan(n_clients, seed=0, length=20_000, seq_len=8):
    corpus = generate_corpus("web", length, seed=seed + 11, seq_len=seq_len)
    return partition_iid(corpus, n_clients, seed, seq_len)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
