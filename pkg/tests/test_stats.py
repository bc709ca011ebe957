import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from esr import grad as G
from esr import oracle as O
from esr import stats as S
from esr import treemath
from esr.model import MarginalSet
from esr.treebank import BOS, EOS, ROOT, Sentence, Vocab

V = Vocab(("A", "B"), ("r", "s"))


def single(tag, head, label):
    return MarginalSet.from_arrays([(np.asarray(tag, float), np.asarray(head, float), np.asarray(label, float))])


def as_dict(spec, vec):
    return {e: v for e, v in zip(spec.events(), vec) if v}


def test_single_arc_counts(tiny_vocab, nv):
    spec = S.get_spec(tiny_vocab, "CLD")
    got = as_dict(spec, S.count_gold(spec, [nv], tiny_vocab))
    assert got == {("N", "nsubj", "right"): 1.0, ("V", "root", "root"): 1.0}


def test_bigram_counts_with_boundaries(tiny_vocab, nv):
    spec = S.get_spec(tiny_vocab, "POS2")
    got = as_dict(spec, S.count_gold(spec, [nv], tiny_vocab))
    assert got == {(BOS, "N"): 1.0, ("N", "V"): 1.0, ("V", EOS): 1.0}


def test_empty_batch_counts_zero(tiny_vocab):
    spec = S.get_spec(tiny_vocab, "HCLD")
    assert not S.count_gold(spec, [], tiny_vocab).any()


def test_expect_single_token_root_arc():
    spec = S.get_spec(Vocab(("A", "B"), ("r",)), "CLD")
    m = single([[0.7, 0.3]], [[1.0, 0.0]], [[[1.0], [1.0]]])
    g = S.expect(spec, m).value
    assert g[spec.index(("A", "r", "root"))] == pytest.approx(0.7)


def test_expect_bigram_interior():
    spec = S.get_spec(V, "POS2")
    head = np.array([[1.0, 0, 0], [1.0, 0, 0]])
    m = single([[0.7, 0.3], [0.2, 0.8]], head, np.full((2, 3, 2), 0.5))
    assert S.expect(spec, m).value[spec.index(("A", "A"))] == pytest.approx(0.14)


def test_valency_pmf_two_children():
    # children 1 and 2 attach to column 0 with probabilities 0.2 and 0.5
    head = G.Node(np.array([[[0.2, 0.8, 0.0], [0.5, 0.0, 0.5]]]))
    pmf = S.valency_pmf(head).value[0, 0]
    np.testing.assert_allclose(pmf[:3], [0.4, 0.5, 0.1], atol=1e-15)


def test_aggregate_proportion_and_conditional():
    spec = S.StatisticSpec("X", "pos_unigram", ("TAG",), (), ("A", "B"), ())
    np.testing.assert_allclose(S.aggregate(spec, np.array([1.0, 1.0])).values, [0.5, 0.5])
    cond = S.get_spec(Vocab(("N",), ("nsubj", "obj")), "LD|C")
    g = np.zeros(cond.dim_g)
    g[cond.index(("N", "nsubj", "left"))] = 0.3
    g[cond.index(("N", "obj", "right"))] = 0.3
    f = S.aggregate(cond, g).values
    assert f[cond.index(("N", "nsubj", "left"))] == pytest.approx(0.5)


def test_aggregate_flags_zero_denominators():
    cond = S.get_spec(V, "LD|C")
    g = np.zeros(cond.dim_g)
    g[cond.index(("A", "r", "left"))] = 1.0
    v = S.aggregate(cond, g)
    assert not v.undefined[cond.index(("A", "s", "root"))]
    assert v.undefined[cond.index(("B", "r", "left"))]
    assert v.values[cond.index(("B", "r", "left"))] == 0.0


def test_aggregate_rejects_negative_counts():
    spec = S.get_spec(V, "POS1")
    with pytest.raises(S.StatisticError, match="negative"):
        S.aggregate(spec, np.array([1.0, -0.5]))


def test_universal_zero_mass_gives_zero():
    spec = S.universal_spec(V, [(ROOT, "B", "r"), ("A", "A", "s")])
    m = single([[1.0, 0.0]], [[1.0, 0.0]], [[[1.0, 0.0], [1.0, 0.0]]])
    np.testing.assert_array_equal(S.statistic(spec, m).values.value, [0.0, 0.0])


def test_universal_fraction_of_tokens():
    spec = S.universal_spec(V, [(ROOT, "B", "r")])
    eps = 0.03
    m = single([[1 - eps, eps]], [[1.0, 0.0]], [[[1.0, 0.0], [1.0, 0.0]]])
    assert S.statistic(spec, m).values.value[0] == pytest.approx(eps)


def test_entropies():
    uni = single([[0.5, 0.5]], [[1.0, 0.0]], [[[0.5, 0.5], [0.5, 0.5]]])
    assert S.entropy_stats(uni, "token").value == pytest.approx(np.log(2))
    assert S.entropy_stats(uni, "edge").value == pytest.approx(0.0)
    # the two-token weighted example, as head distributions (rows normalized)
    w = np.array([[1.0, 0.0, 3.0], [1.0, 2.0, 0.0]])
    head = w / w.sum(1, keepdims=True)
    m = single(np.full((2, 2), 0.5), head, np.full((2, 3, 2), 0.5))
    assert S.entropy_stats(m, "tree").value == pytest.approx(0.6730116670092565, abs=1e-10)


def test_unknown_family():
    with pytest.raises(S.StatisticError):
        S.get_spec(V, "NOPE")
    with pytest.raises(S.StatisticError):
        S.StatisticSpec("x", "quadruple", (), (), ("A",), ("r",))


def test_forbidden_file(tmp_path):
    p = tmp_path / "forbidden.txt"
    p.write_text("# head child label\nA B r\nB A s\n<ROOT> A s  # trailing comment\n")
    triples = S.read_forbidden(p)
    assert S.universal_spec(V, triples).dim_f == 3
    p.write_text("A B\n")
    with pytest.raises(S.StatisticError, match=":1:"):
        S.read_forbidden(p)


def test_vocab_mismatch():
    spec = S.get_spec(V, "CLD")
    m = single([[0.2, 0.3, 0.5]], [[1.0, 0.0]], [[[1.0, 0.0], [1.0, 0.0]]])
    with pytest.raises(S.StatisticError, match="spec expects"):
        S.expect(spec, m)


def test_proportions_sum_to_one(syn, syn_vocab):
    for name in ("POS1", "POS2", "CLD", "HCLD", "LDIST", "SIB", "GC", "VAL"):
        spec = S.get_spec(syn_vocab, name)
        assert S.gold_statistic(spec, syn.sentences, syn_vocab).values.sum() == pytest.approx(1.0)


def test_per_sentence_sums_to_batch():
    vocab, m = O.random_instance(3)
    rng = np.random.default_rng(1)
    m = O.random_marginals(rng, [3, 2, 1], 3, 2)
    for name, spec in S.catalog(vocab).items():
        if spec.is_entropy:
            continue
        per = S.expect(spec, m, per_sentence=True).value
        np.testing.assert_allclose(per.sum(0), S.expect(spec, m).value, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 100_000))
def test_expect_matches_oracle(seed):
    vocab, m = O.random_instance(seed)
    for name, spec in O.oracle_specs(vocab, np.random.default_rng(seed)).items():
        if spec.is_entropy:
            assert S.entropy_stats(m, spec.mode).value == pytest.approx(O.oracle_entropy(m, spec.mode), abs=1e-10)
        else:
            np.testing.assert_allclose(S.expect(spec, m).value, O.oracle_counts(spec, m), atol=1e-10)


def test_expect_gradient_every_family():
    vocab, _ = O.random_instance(0)
    rng = np.random.default_rng(2)
    logits = [rng.normal(size=(1, 2, 3)), rng.normal(size=(1, 2, 3)), rng.normal(size=(1, 2, 3, 2))]
    hm = np.array([[[True, False, True], [True, True, False]]])
    for name, spec in O.oracle_specs(vocab).items():
        if spec.is_entropy:
            continue
        c = rng.normal(size=spec.dim_f)

        def fn(ps):
            tag = G.softmax(ps[0])
            head = G.softmax(G.where(hm, ps[1], -1e9)) * hm.astype(float)
            label = G.softmax(ps[2])
            m = MarginalSet(tag, head, label, np.array([2]))
            return G.sum(S.statistic(spec, m).values * c)

        assert G.grad_check(fn, logits) < 1e-5, name
