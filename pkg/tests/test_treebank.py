import pytest
from hypothesis import given, settings, strategies as st

from esr.treebank import (Sentence, Treebank, TreebankError, Vocab, check_tree, coarsen, dev_size,
                          format_conllu, parse_conllu, read_conllu, split_train_dev, subsample,
                          write_conllu)

TWO = """# sent_id = a
1\tdogs\t_\tNOUN\t_\t_\t2\tnsubj:outer\t_\t_
2\tbark\t_\tVERB\t_\t_\t0\troot\t_\t_

"""

CYCLE = """# sent_id = cyc
1\ta\t_\tX\t_\t_\t2\tdep\t_\t_
2\tb\t_\tX\t_\t_\t3\tdep\t_\t_
3\tc\t_\tX\t_\t_\t1\tdep\t_\t_

"""


def test_labeled_parse_coarsens_labels():
    (s,) = parse_conllu(TWO.splitlines()).sentences
    assert s.heads == (2, 0)
    assert s.labels == ("nsubj", "root")
    assert s.deprels == ("nsubj:outer", "root")
    assert s.sent_id == "a"


def test_cycle_names_sentence():
    with pytest.raises(TreebankError, match="cyc"):
        parse_conllu(CYCLE.splitlines())


def test_multi_root_rejected():
    text = TWO.replace("\t2\tnsubj:outer", "\t0\tnsubj:outer")
    with pytest.raises(TreebankError, match="one root"):
        parse_conllu(text.splitlines())


def test_unlabeled_mode_keeps_words_only():
    (s,) = parse_conllu(TWO.splitlines(), mode="unlabeled").sentences
    assert s.n == 2 and s.words == ("dogs", "bark")
    assert s.tags is None and not s.labeled


def test_unlabeled_mode_accepts_cycles():
    assert len(parse_conllu(CYCLE.splitlines(), mode="unlabeled")) == 1


def test_malformed_line_reports_line_number():
    bad = TWO.replace("2\tbark\t_\tVERB", "2\tbark\tVERB")
    with pytest.raises(TreebankError, match=r":3:"):
        parse_conllu(bad.splitlines())


def test_missing_fields_in_labeled_mode():
    bad = TWO.replace("VERB", "_")
    with pytest.raises(TreebankError, match="UPOS"):
        parse_conllu(bad.splitlines())


def test_multiword_and_empty_nodes_skipped():
    text = ("1-2\tdogs'\t_\t_\t_\t_\t_\t_\t_\t_\n" + TWO.split("\n", 1)[1]
            .replace("\n\n", "\n2.1\tx\t_\tX\t_\t_\t_\t_\t_\t_\n\n"))
    (s,) = parse_conllu(text.splitlines()).sentences
    assert s.n == 2


def test_roundtrip(tmp_path, syn):
    path = tmp_path / "x.conllu"
    write_conllu(syn, path)
    back = read_conllu(path)
    assert back.sentences == syn.sentences
    assert format_conllu(back) == format_conllu(syn)


def test_check_tree():
    check_tree((2, 0, 2))
    with pytest.raises(TreebankError):
        check_tree((0, 0))
    with pytest.raises(TreebankError):
        check_tree((2, 1))


def test_self_head_rejected():
    with pytest.raises(TreebankError, match="heads itself"):
        Sentence(("a",), ("X",), (1,), ("dep",))


@pytest.mark.parametrize("d,c", [("nsubj:pass", "nsubj"), ("root", "root"), ("a:b:c", "a")])
def test_coarsen(d, c):
    assert coarsen(d) == c


def test_subsample(syn):
    full = subsample(syn, len(syn), seed=3)
    assert set(s.sent_id for s in full) == set(s.sent_id for s in syn)
    assert subsample(syn, 10, 5).sentences == subsample(syn, 10, 5).sentences
    with pytest.raises(ValueError):
        subsample(syn, len(syn) + 1, 0)


@pytest.mark.parametrize("n,d", [(50, 50), (500, 100), (100, 100), (1, 1)])
def test_dev_size(n, d):
    assert dev_size(n) == d


def test_split_disjoint(syn):
    train, dev = split_train_dev(syn, 40, 0)
    assert len(train) == 40 and len(dev) == 40
    assert not {s.sent_id for s in train} & {s.sent_id for s in dev}


def test_vocab_maps_unknown_words():
    v = Vocab.build([Sentence(("a", "a", "b"), ("X", "X", "Y"), (0, 1, 1), ("root", "d", "d"))])
    ids = v.word_ids(["A", "zzz"])
    assert v.words[ids[0]] == "a" and v.words[ids[1]] == "<unk>"
    assert Vocab.from_dict(v.to_dict()) == v
    with pytest.raises(TreebankError):
        v.tag_ids(["Q"])


def test_reserved_tag_collision():
    with pytest.raises(TreebankError, match="reserved"):
        Vocab(("<ROOT>",), ("x",))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 10), min_size=1, max_size=8))
def test_random_head_sequences_validated(heads):
    n = len(heads)
    if any(h > n or h == i for i, h in enumerate(heads, 1)):
        return
    tb = Treebank([Sentence(tuple("w" * n), ("X",) * n, tuple(heads), ("d",) * n, "r")])
    try:
        check_tree(heads)
        ok = True
    except TreebankError:
        ok = False
    if ok:
        assert parse_conllu(format_conllu(tb).splitlines()).sentences[0].heads == tuple(heads)
    else:
        with pytest.raises(TreebankError):
            parse_conllu(format_conllu(tb).splitlines())
