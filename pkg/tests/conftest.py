import sys

import numpy as np
import pytest

from esr import oracle as O
from esr.treebank import Sentence, Treebank, Vocab


@pytest.fixture(scope="session")
def grammar():
    return O.parse_grammar(O.EXAMPLE_GRAMMAR)


@pytest.fixture(scope="session")
def syn(grammar):
    """A small fixed synthetic treebank."""
    return O.syngen(grammar, 120, 7)


@pytest.fixture(scope="session")
def syn_vocab(grammar, syn):
    words = Vocab.build(syn.sentences).words
    return Vocab(grammar.vocab().tags, grammar.vocab().labels, words)


@pytest.fixture
def tiny_vocab():
    return Vocab(("N", "V"), ("nsubj", "obj", "root"))


@pytest.fixture
def nv():
    """'dogs bark' with N <-nsubj- V."""
    return Sentence(("dogs", "bark"), ("N", "V"), (2, 0), ("nsubj", "root"), "s1")


def rng(seed=0):
    return np.random.default_rng(seed)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
