import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from esr import stats as S
from esr import targets as TG
from esr.treebank import ROOT, Sentence, Vocab

AB = Vocab(("A", "B"), ("root",))
SA = Sentence(("x",), ("A",), (0,), ("root",), "a")
SB = Sentence(("y",), ("B",), (0,), ("root",), "b")


def test_single_sentence_gives_zero_margin(syn, syn_vocab):
    specs = [S.get_spec(syn_vocab, n) for n in ("CLD", "HLD|C", "VAL", "SIB")]
    b = TG.bootstrap(specs, syn.sentences[:1], syn_vocab, k=8, B=50, seed=3)
    for spec in specs:
        t, sigma = b.dense(spec)
        assert np.all(sigma == 0.0)
        np.testing.assert_allclose(t, S.gold_statistic(spec, syn.sentences[:1], syn_vocab).values, atol=1e-15)


def test_bernoulli_moments():
    spec = S.get_spec(AB, "POS1")
    b = TG.bootstrap([spec], [SA, SB], AB, k=1, B=100_000, seed=0)
    t, sigma = b.entries["POS1"][("A",)]
    assert abs(t - 0.5) < 0.01 and abs(sigma - 0.5) < 0.01


def test_seed_determinism(syn, syn_vocab):
    specs = [S.get_spec(syn_vocab, "CLD")]
    a = TG.bootstrap(specs, syn.sentences, syn_vocab, k=4, B=30, seed=9)
    assert a == TG.bootstrap(specs, syn.sentences, syn_vocab, k=4, B=30, seed=9)
    assert a != TG.bootstrap(specs, syn.sentences, syn_vocab, k=4, B=30, seed=10)


def test_file_roundtrip_bit_exact(tmp_path, syn, syn_vocab):
    specs = [S.get_spec(syn_vocab, n) for n in ("CLD", "POS2", "LD|C")]
    b = TG.bootstrap(specs, syn.sentences, syn_vocab, k=8, B=40, seed=1, source="syn")
    b = TG.merge(b, TG.universal_targets([("DET", "VERB", "obj")]))
    path = tmp_path / "b.tsv"
    TG.write_bundle(b, path)
    back = TG.read_bundle(path)
    assert back == b
    assert TG.format_bundle(back) == path.read_text()
    for spec in specs:
        for x, y in zip(b.dense(spec), back.dense(spec)):
            assert x.tobytes() == y.tobytes()


def test_bootstrap_argument_errors():
    spec = S.get_spec(AB, "POS1")
    with pytest.raises(TG.TargetsError, match="B must be >= 2"):
        TG.bootstrap([spec], [SA], AB, B=1)
    with pytest.raises(TG.TargetsError):
        TG.bootstrap([spec], [], AB)


def test_entropy_specs_skipped():
    specs = [S.get_spec(AB, "POS1"), S.get_spec(AB, "H_TREE")]
    assert TG.bootstrap(specs, [SA, SB], AB, k=1, B=10).families == ["POS1"]


def test_conditional_undefined_replicates_excluded():
    # only SA has an A token, so replicates made only of SB leave (A | CHILD_TAG) undefined
    spec = S.get_spec(AB, "LD|C")
    b = TG.bootstrap([spec], [SA, SB], AB, k=1, B=200, seed=0)
    assert b.entries["LD|C"][("A", "root", "root")] == (1.0, 0.0)


def test_universal_targets_and_duplicates():
    b = TG.universal_targets([("A", "B", "r"), ("B", "A", "r"), (ROOT, "A", "r")])
    assert list(b.entries["UNIARC"].values()) == [(0.0, 0.0)] * 3
    with pytest.warns(UserWarning, match="duplicate"):
        b = TG.universal_targets([("A", "B", "r"), ("A", "B", "r")])
    assert len(b.entries["UNIARC"]) == 1


def test_universal_entries_survive_roundtrip():
    b = TG.universal_targets([("A", "B", "r")], source="list.txt")
    assert TG.parse_bundle(TG.format_bundle(b)) == b


@pytest.mark.parametrize("line,msg", [
    ("CLD\tA r left\tx\t0.1", "non-numeric"),
    ("CLD\tA r left\t0.5\t-0.1", "margins"),
    ("CLD\tA r left", "expected"),
])
def test_malformed_lines_report_line_number(line, msg):
    text = "version\t1\nk\t8\nB\t10\nseed\t0\nsource\tx\nfamily\tCLD\n" + line + "\n"
    with pytest.raises(TG.TargetsError, match=rf":7: .*{msg}|:7: {msg}"):
        TG.parse_bundle(text)


def test_missing_header():
    with pytest.raises(TG.TargetsError, match="missing header"):
        TG.parse_bundle("family\tCLD\n")


def test_unknown_event_rejected():
    b = TG.TargetsBundle({"POS1": {("Z",): (0.5, 0.1)}})
    with pytest.raises(TG.TargetsError, match="domain"):
        b.dense(S.get_spec(AB, "POS1"))


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 1, allow_subnormal=True), st.floats(0, 1e3))
def test_numbers_roundtrip_exactly(t, sigma):
    b = TG.TargetsBundle({"POS1": {("A",): (t, sigma)}}, k=1, B=2)
    assert TG.parse_bundle(TG.format_bundle(b)) == b
