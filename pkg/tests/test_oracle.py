import numpy as np
import pytest

from esr import oracle as O
from esr import stats as S
from esr import targets as TG
from esr.treebank import Vocab, check_tree


def test_arborescence_counts():
    # single-root arborescences on n labelled nodes: n^(n-1)
    assert [len(O.arborescences(n)) for n in (1, 2, 3, 4)] == [1, 2, 9, 64]
    for h in O.arborescences(3):
        check_tree(tuple(h))


def test_structure_counts():
    m = O.random_marginals(np.random.default_rng(0), [2], 2, 2)
    ind = O.enumerate_structures(m, "independent")
    assert len(ind) == 64 and ind.probs.sum() == pytest.approx(1.0)
    tree = O.enumerate_structures(m, "tree")
    assert len(tree) == 32 and tree.probs.sum() == pytest.approx(1.0)
    one = O.enumerate_structures(O.random_marginals(np.random.default_rng(1), [1], 3, 2))
    assert len(one) == 6


def test_caps_are_errors():
    m = O.random_marginals(np.random.default_rng(0), [5], 2, 2)
    with pytest.raises(O.OracleError, match="cap"):
        O.enumerate_structures(m)
    m = O.random_marginals(np.random.default_rng(0), [2], 4, 2)
    with pytest.raises(O.OracleError, match="cap"):
        O.oracle_counts(S.get_spec(Vocab(tuple("ABCD"), ("r", "s")), "POS1"), m)


def test_one_hot_matches_gold_aggregation(nv):
    vocab = Vocab(("N", "V"), ("nsubj", "root"))
    m = O.one_hot_marginals(vocab.tag_ids(nv.tags), nv.heads, vocab.label_ids(nv.labels), 2, 2)
    for name in ("CLD", "HCLD", "POS2", "VAL", "LD|C", "SIB", "GC"):
        spec = S.get_spec(vocab, name)
        np.testing.assert_array_equal(O.oracle_expect(spec, m), S.gold_statistic(spec, [nv], vocab).values)


def test_valency_dp_matches_enumeration():
    for seed in range(20):
        vocab, m = O.random_instance(seed)
        spec = S.get_spec(vocab, "VAL")
        np.testing.assert_allclose(S.expect(spec, m).value, O.oracle_counts(spec, m), atol=1e-12)


def test_tree_mode_counts_use_arborescences():
    m = O.random_marginals(np.random.default_rng(4), [3], 2, 2)
    vocab = Vocab(("T0", "T1"), ("r0", "r1"))
    spec = S.get_spec(vocab, "LD")
    g = O.oracle_counts(spec, m, "tree")
    root = sum(g[spec.index((lab, "root"))] for lab in vocab.labels)
    assert root == pytest.approx(1.0)


def test_run_suite_small():
    for name, err in O.run_suite(instances=15, seed=11):
        assert err < 1e-10, name


# ---------------------------------------------------------------- grammars

def test_syngen_deterministic(grammar):
    a, b = O.syngen(grammar, 1000, 5), O.syngen(grammar, 1000, 5)
    assert a.sentences == b.sentences
    assert a.sentences != O.syngen(grammar, 1000, 6).sentences
    for s in a.sentences[:200]:
        check_tree(s.heads)


@pytest.mark.parametrize("family", ["CLD", "HCLD"])
def test_corpus_statistics_match_analytic(grammar, family):
    tb = O.syngen(grammar, 3000, 0)
    vocab = grammar.vocab()
    spec = S.get_spec(vocab, family)
    sigma_k = TG.bootstrap([spec], tb.sentences, vocab, k=len(tb), B=200, seed=0)
    t, sigma = sigma_k.dense(spec)
    analytic = O.analytic_statistics(grammar)[family]
    assert sum(analytic.values()) == pytest.approx(1.0)
    for event, v in analytic.items():
        i = spec.index(event)
        assert abs(t[i] - v) <= 3 * sigma[i] + 1e-12, event


def test_forbidden_triple_never_generated(grammar, syn):
    vocab = grammar.vocab()
    spec = S.universal_spec(vocab, [("NOUN", "VERB", "nsubj"), ("ADJ", "NOUN", "amod")])
    assert S.count_gold(spec, syn.sentences, vocab)[:2].tolist() == [0.0, 0.0]


def test_grammar_errors():
    bad = O.EXAMPLE_GRAMMAR.replace("VERB = 0.9", "VERB = 0.5")
    with pytest.raises(O.OracleError, match="root distribution"):
        O.parse_grammar(bad)
    unsat = O.EXAMPLE_GRAMMAR.replace("NOUN.left = DET:0.55 ADJ:0.45", "NOUN.left = DET:0.0")
    with pytest.raises(O.OracleError, match="sums to 0"):
        O.parse_grammar(unsat)
    explode = O.EXAMPLE_GRAMMAR.replace("NOUN.right = 0.2", "NOUN.right = 0.9")
    with pytest.raises(O.OracleError, match="subcritical"):
        O.parse_grammar(explode)
    with pytest.raises(O.OracleError, match="missing"):
        O.parse_grammar("[grammar]\ntags = A\nlabels = x\n")


def test_read_grammar(tmp_path):
    p = tmp_path / "g.ini"
    p.write_text(O.EXAMPLE_GRAMMAR)
    g = O.read_grammar(p)
    assert g.tags == ("VERB", "NOUN", "ADJ", "DET", "ADP")
    assert g.expected_tag_counts().sum() > 1
