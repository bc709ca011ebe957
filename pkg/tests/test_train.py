import numpy as np
import pytest

from esr import grad as G
from esr import model as M
from esr import stats as S
from esr import targets as TG
from esr import train as T

SMALL = M.ModelConfig(embed_dim=6, hidden_dim=8)


def quick(**kw):
    base = dict(epochs=2, steps_per_epoch=3, warmup=2, batch_size=4, lr=5e-3)
    base.update(kw)
    return T.TrainConfig(**base)


@pytest.fixture(scope="module")
def data(syn, syn_vocab):
    lab, dev, unl = syn.sentences[:20], syn.sentences[20:40], [s.unlabeled() for s in syn.sentences[40:]]
    bundle = TG.bootstrap([S.get_spec(syn_vocab, "CLD")], lab, syn_vocab, k=4, B=20, seed=0)
    return lab, dev, unl, bundle


def test_schedule_points():
    assert T.schedule(0, 100, 20) == 0.0
    assert T.schedule(20, 100, 20) == 1.0
    assert T.schedule(60, 100, 20) == pytest.approx(0.5)
    assert T.schedule(100, 100, 20) == 0.0
    with pytest.raises(ValueError, match="warmup"):
        T.schedule(0, 10, 20)


def test_sgd_update_rule(syn_vocab):
    p = M.ModelParams(syn_vocab, SMALL, {"w": G.param(np.array([1.0, -2.0]))})
    p["w"].grad = np.array([0.5, -1.0])
    T.Optimizer(p, quick(optimizer="sgd")).step(0.1)
    np.testing.assert_allclose(p["w"].value, [0.95, -1.9])


def test_adamw_first_step_is_sign_sized(syn_vocab):
    p = M.ModelParams(syn_vocab, SMALL, {"w": G.param(np.array([1.0, -2.0]))})
    p["w"].grad = np.array([0.5, -3.0])
    T.Optimizer(p, quick(weight_decay=0.0)).step(0.1)
    np.testing.assert_allclose(p["w"].value, [0.9, -1.9], atol=1e-6)


def test_clip_gradients(syn_vocab):
    p = M.ModelParams(syn_vocab, SMALL, {"a": G.param(np.zeros(2)), "b": G.param(np.zeros(1))})
    p["a"].grad, p["b"].grad = np.array([3.0, 0.0]), np.array([4.0])
    assert T.clip_gradients(p, 1.0) == pytest.approx(5.0)
    assert np.sqrt((p["a"].grad ** 2).sum() + (p["b"].grad ** 2).sum()) == pytest.approx(1.0)


def test_config_validation():
    with pytest.raises(ValueError):
        T.TrainConfig(alpha=-1)
    with pytest.raises(ValueError):
        T.TrainConfig(mix_unlabeled=0)
    with pytest.raises(ValueError):
        T.TrainConfig(aggregation="per_token")


def test_read_config_with_overrides():
    text = "[train]\nalpha = 0.5\nepochs = 3\n[model]\nhidden_dim = 16\narc_rank = none\n[data]\nlabeled = x.conllu\n"
    cfg, mcfg, data = T.read_config(text, {"epochs": "7", "model.embed_dim": "4"})
    assert cfg.alpha == 0.5 and cfg.epochs == 7
    assert mcfg.hidden_dim == 16 and mcfg.embed_dim == 4 and mcfg.arc_rank is None
    assert data == {"labeled": "x.conllu"}
    with pytest.raises(ValueError, match="unknown"):
        T.read_config("[train]\nlearning_rate = 1\n")


def test_record_roundtrip():
    rec = {"event": "step", "step": 3, "L": 0.1 + 0.2, "name": "CLD"}
    assert T.parse_record(T.format_record(rec)) == rec


def test_supervised_reduction(data, syn_vocab):
    lab, dev, unl, _ = data
    r = T.train(M.init_params(syn_vocab, SMALL, 0), lab, [], None, quick(alpha=0.0), dev)
    steps = [x for x in r.log if x["event"] == "step"]
    assert all("C" not in x and x["O"] == x["L"] for x in steps)
    assert r.log[-1]["event"] == "final" and r.best_epoch in (1, 2)


def test_fixed_seed_identical_logs(data, syn_vocab):
    lab, dev, unl, bundle = data
    runs = [T.train(M.init_params(syn_vocab, SMALL, 1), lab, unl, bundle, quick(alpha=0.5, seed=4), dev)
            for _ in range(2)]
    assert runs[0].lines() == runs[1].lines()
    assert M.params_digest(runs[0].params) == M.params_digest(runs[1].params)


def test_alpha_zero_logs_differ_only_in_c(data, syn_vocab):
    lab, dev, unl, bundle = data
    plain = T.train(M.init_params(syn_vocab, SMALL, 2), lab, unl, None, quick(alpha=0.0), dev)
    logged = T.train(M.init_params(syn_vocab, SMALL, 2), lab, unl, bundle, quick(alpha=0.0), dev)
    strip = lambda r: [{k: v for k, v in x.items() if not k.startswith("C")} for x in r.log]
    assert strip(plain) == strip(logged)
    assert any("C_CLD" in x for x in logged.log)


def test_unsupervised_only(data, syn_vocab):
    _, dev, unl, bundle = data
    r = T.train(M.init_params(syn_vocab, SMALL, 0), [], unl, bundle, quick(alpha=1.0), dev)
    assert all("L" not in x for x in r.log if x["event"] == "step")


def test_errors(data, syn_vocab):
    lab, dev, unl, bundle = data
    p = M.init_params(syn_vocab, SMALL, 0)
    with pytest.raises(T.TrainingError, match="unlabeled"):
        T.train(p, lab, [], bundle, quick(alpha=0.1))
    with pytest.raises(T.TrainingError, match="bundle"):
        T.train(p, lab, unl, None, quick(alpha=0.1))
    with pytest.raises(T.TrainingError, match="nothing"):
        T.train(p, [], unl, None, quick(alpha=0.0))


def test_nonfinite_names_component(data, syn_vocab):
    lab, dev, unl, bundle = data
    spec = S.get_spec(syn_vocab, "CLD")
    bad = TG.TargetsBundle({"CLD": {spec.events()[0]: (float("nan"), 0.1)}})
    with pytest.raises(T.TrainingError, match="C_CLD"):
        T.train(M.init_params(syn_vocab, SMALL, 0), lab, unl, bad, quick(alpha=0.1))


def test_early_stopping_ties_keep_earliest(data, syn_vocab, monkeypatch):
    lab, dev, unl, _ = data
    monkeypatch.setattr(T, "evaluate_dev", lambda params, dev: {"pos": 0.5, "las": 0.5, "avg": 0.5})
    p = M.init_params(syn_vocab, SMALL, 0)
    snapshots = []
    r = T.train(p, lab, [], None, quick(alpha=0.0, epochs=3), dev,
                on_record=lambda rec: snapshots.append(p.arrays()) if rec["event"] == "epoch" else None)
    assert r.best_epoch == 1
    for k, v in snapshots[0].items():
        np.testing.assert_array_equal(p[k].value, v)
