import re

import pytest

from esr import cli
from esr import oracle as O
from esr.treebank import Treebank, write_conllu

TINY = ["--set", "epochs=2", "--set", "steps_per_epoch=3", "--set", "warmup=1",
        "--set", "model.hidden_dim=8", "--set", "model.embed_dim=4", "--set", "batch_size=4"]


@pytest.fixture(scope="module")
def files(tmp_path_factory, grammar):
    d = tmp_path_factory.mktemp("cli")
    tb = O.syngen(grammar, 160, 3).sentences
    paths = {}
    for name, part in (("lab", tb[:40]), ("dev", tb[40:70]), ("unl", tb[70:])):
        paths[name] = d / f"{name}.conllu"
        write_conllu(Treebank(part), paths[name])
    paths["dir"] = d
    assert cli.main(["estimate-targets", "--labeled", str(paths["lab"]), "--stats", "CLD,POS1,LD|C",
                     "--B", "50", "--out", str(d / "b.tsv")]) == 0
    paths["bundle"] = d / "b.tsv"
    return paths


def test_inspect_bundle_proportions_sum_to_one(files, capsys):
    assert cli.main(["inspect-stats", "--bundle", str(files["bundle"])]) == 0
    out = capsys.readouterr().out
    sums = [float(x) for x in re.findall(r"^  sum\t(\S+)$", out, re.M)]
    assert len(sums) == 2 and all(abs(s - 1) < 1e-6 for s in sums)
    assert "[LD|C]" in out


def test_inspect_treebank(files, capsys):
    assert cli.main(["inspect-stats", "--treebank", str(files["lab"]), "--stats", "POS1"]) == 0
    assert "[POS1]" in capsys.readouterr().out


def test_estimate_is_reproducible(files):
    out = files["dir"] / "b2.tsv"
    cli.main(["estimate-targets", "--labeled", str(files["lab"]), "--stats", "CLD,POS1,LD|C",
              "--B", "50", "--out", str(out)])
    assert out.read_bytes() == files["bundle"].read_bytes()


def test_universal_targets(files, tmp_path):
    forb = tmp_path / "f.txt"
    forb.write_text("NOUN VERB nsubj\nDET ADJ amod\nNOUN VERB nsubj\n")
    with pytest.warns(UserWarning):
        assert cli.main(["universal-targets", "--forbidden", str(forb), "--out", str(tmp_path / "u.tsv")]) == 0
    assert (tmp_path / "u.tsv").read_text().count("UNIARC\t") == 2


def _train(files, tmp_path, name, extra):
    log = tmp_path / f"{name}.log"
    args = ["train", "--labeled", str(files["lab"]), "--unlabeled", str(files["unl"]),
            "--dev", str(files["dev"]), "--seed", "1", "--out", str(tmp_path / f"{name}.ck"),
            "--log", str(log)] + TINY + extra
    assert cli.main(args) == 0
    return [l for l in log.read_text().splitlines() if not l.startswith("#")], log.read_text()


def test_train_alpha_zero_vs_bundle(files, tmp_path):
    plain, _ = _train(files, tmp_path, "plain", ["--set", "alpha=0"])
    with_c, text = _train(files, tmp_path, "esr", ["--set", "alpha=0", "--bundle", str(files["bundle"])])
    strip = lambda lines: [re.sub(r" C\S*=\S+", "", l) for l in lines]
    assert strip(plain) == strip(with_c) and plain != with_c
    assert re.search(r"^# esr train config=\w+ seed=1$", text, re.M)


def test_train_reproducible_and_evaluate(files, tmp_path, capsys):
    a, _ = _train(files, tmp_path, "a", ["--set", "alpha=0.1", "--bundle", str(files["bundle"])])
    b, _ = _train(files, tmp_path, "b", ["--set", "alpha=0.1", "--bundle", str(files["bundle"])])
    assert a == b
    assert (tmp_path / "a.ck").read_bytes() == (tmp_path / "b.ck").read_bytes()
    capsys.readouterr()
    assert cli.main(["evaluate", "--checkpoint", str(tmp_path / "a.ck"), "--gold", str(files["dev"]),
                     "--pred-out", str(tmp_path / "pred.conllu")]) == 0
    assert re.match(r"pos=\S+ las=\S+ avg=\S+", capsys.readouterr().out)


def test_train_from_config_file(files, tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text(f"[train]\nalpha = 0\nepochs = 1\nsteps_per_epoch = 2\nwarmup = 1\n"
                   f"[model]\nhidden_dim = 8\nembed_dim = 4\n[data]\nlabeled = {files['lab']}\n")
    assert cli.main(["train", "--config", str(cfg), "--out", str(tmp_path / "c.ck")]) == 0


def test_ablate(files, tmp_path, capsys):
    rec = tmp_path / "rec.tsv"
    assert cli.main(["ablate", "--kind", "aggregation", "--labeled", str(files["lab"]),
                     "--unlabeled", str(files["unl"]), "--dev", str(files["dev"]),
                     "--bundle", str(files["bundle"]), "--seeds", "0", "--records", str(rec)] + TINY) == 0
    assert capsys.readouterr().out.splitlines()[0].split()[:2] == ["method", "runs"]
    assert [l.split("\t")[0] for l in rec.read_text().splitlines()] == ["method", "per_batch", "per_sentence"]


def test_syngen_reproducible(tmp_path):
    for name in ("a", "b"):
        assert cli.main(["syngen", "--size", "30", "--seed", "2", "--out", str(tmp_path / f"{name}.conllu"),
                         "--stats-out", str(tmp_path / f"{name}.tsv")]) == 0
    assert (tmp_path / "a.conllu").read_bytes() == (tmp_path / "b.conllu").read_bytes()
    assert "source\tanalytic" in (tmp_path / "a.tsv").read_text()


def test_oracle_check_exits_zero(capsys):
    assert cli.main(["oracle-check", "--instances", "10"]) == 0
    assert "FAIL" not in capsys.readouterr().out


def test_exit_codes(tmp_path, capsys):
    assert cli.main(["frobnicate"]) == 2
    assert cli.main(["train", "--bogus-flag"]) == 2
    assert cli.main(["inspect-stats"]) == 2
    assert "usage:" in capsys.readouterr().err
    assert cli.main(["evaluate", "--checkpoint", str(tmp_path / "none"), "--gold", "x"]) == 1
    bad = tmp_path / "bad.conllu"
    bad.write_text("1\ta\t_\tX\t_\t_\t1\troot\t_\t_\n\n")
    assert cli.main(["estimate-targets", "--labeled", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert cli.main(["--help"]) == 0
