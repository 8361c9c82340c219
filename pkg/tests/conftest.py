import numpy as np
import pytest

from quoterec.config import TrainConfig
from quoterec.data import Conversation, QuotationSet, load_corpus
from quoterec.model import QuoteRecModel
from quoterec.synth import synth_corpus


def tiny_config(**kw) -> TrainConfig:
    base = dict(dim=8, hidden=6, n_layers=1, n_heads=2, ffn_dim=16, dropout=0.0, batch_size=4,
                max_epochs=3, patience=2, lr=1e-2, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def tiny_model(vocab_size=20, n_quotes=3, seed=0, **kw) -> QuoteRecModel:
    return QuoteRecModel(vocab_size, n_quotes, tiny_config(**kw), np.random.default_rng(seed))


def random_conversations(rng, n, vocab_size=20, max_turns=4, max_len=7, n_quotes=3):
    convs = []
    for i in range(n):
        turns = [list(rng.integers(3, vocab_size, rng.integers(0, max_len + 1)))
                 for _ in range(rng.integers(1, max_turns + 1))]
        convs.append(Conversation(f"c{i}", turns, int(rng.integers(n_quotes))))
    return convs


@pytest.fixture
def quotes3():
    return QuotationSet(["a b", "c d e", "f"], [[3, 4], [5, 6, 7], [8]])


@pytest.fixture(scope="session")
def small_corpus_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth_small")
    return synth_corpus(root, seed=3, n_q=4, n_convs=60, vocab_size=80, noise=0.0)


@pytest.fixture(scope="session")
def small_corpus(small_corpus_dir):
    return load_corpus(small_corpus_dir)


def pytest_terminal_summary(terminalreporter):
    lines = [value for reports in terminalreporter.stats.values() for rep in reports
             if getattr(rep, "when", None) == "call"
             for key, value in rep.user_properties if key == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda x: int(x.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
