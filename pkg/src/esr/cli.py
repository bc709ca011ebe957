"""Command-line entry point.

Exit codes: 0 success, 1 validation error, 2 usage error.
"""

from __future__ import annotations

import argparse
import datetime
import sys
import time
from pathlib import Path

import numpy as np

from . import evaluation, model as M, oracle, stats as S, targets as TG, train as T, treemath
from .treebank import Treebank, TreebankError, Vocab, read_conllu, write_conllu

ABLATIONS = {
    "loss-variant": [("smooth_l1", {"distance": "smooth_l1", "variant": "continuous"}),
                     ("smooth_l1_as_written", {"distance": "smooth_l1", "variant": "as_written"}),
                     ("hard_l1", {"distance": "hard_l1"}),
                     ("l1", {"distance": "l1"}),
                     ("l2", {"distance": "l2"})],
    "aggregation": [("per_batch", {"aggregation": "per_batch"}),
                    ("per_sentence", {"aggregation": "per_sentence"})],
}


class UsageError(Exception):
    pass


def _stamp(args, seed) -> str:
    items = {k: str(v) for k, v in sorted(vars(args).items()) if k != "func"}
    return f"# esr {args.command} config={T.config_hash(items)} seed={seed}"


def _names(text: str) -> list[str]:
    return [n.strip() for n in text.split(",") if n.strip()]


def _vocab(labeled, unlabeled=(), extra_tags=(), extra_labels=()) -> Vocab:
    v = Vocab.build(labeled, unlabeled)
    tags = tuple(sorted(set(v.tags) | set(extra_tags)))
    labels = tuple(sorted(set(v.labels) | set(extra_labels)))
    return Vocab(tags, labels, v.words)


# ---------------------------------------------------------------- subcommands

def cmd_estimate_targets(args) -> int:
    tb = read_conllu(args.labeled)
    vocab = _vocab(tb)
    forbidden = S.read_forbidden(args.forbidden) if args.forbidden else None
    specs = [S.get_spec(vocab, n, forbidden) for n in _names(args.stats)]
    bundle = TG.bootstrap(specs, tb.sentences, vocab, args.k, args.B, args.seed, source=str(args.labeled))
    TG.write_bundle(bundle, args.out)
    print(_stamp(args, args.seed), file=sys.stderr)
    print(f"wrote {len(bundle.families)} families to {args.out}")
    return 0


def cmd_universal_targets(args) -> int:
    bundle = TG.universal_targets(S.read_forbidden(args.forbidden), source=str(args.forbidden))
    TG.write_bundle(bundle, args.out)
    print(_stamp(args, 0), file=sys.stderr)
    print(f"wrote {sum(len(v) for v in bundle.entries.values())} forbidden triples to {args.out}")
    return 0


def _print_family(name: str, rows, proportion: bool | None):
    total = 0.0
    print(f"[{name}]")
    for event, t, s in rows:
        total += t
        suffix = "" if s is None else f"\t{s:.6f}"
        print(f"  {' '.join(event)}\t{t:.6f}{suffix}")
    if proportion:
        print(f"  sum\t{total:.6f}")


def cmd_inspect_stats(args) -> int:
    if bool(args.bundle) == bool(args.treebank):
        raise UsageError("give exactly one of --bundle or --treebank")
    if args.bundle:
        bundle = TG.read_bundle(args.bundle)
        print(f"# k={bundle.k} B={bundle.B} seed={bundle.seed} source={bundle.source}")
        for fam, entries in bundle.entries.items():
            proportion = None
            if not fam.startswith("UNIARC"):
                spec_rows = [r for r in S.CATALOG_ROWS if r[0] == fam]
                proportion = bool(spec_rows) and not spec_rows[0][3]
            _print_family(fam, [(e, t, s) for e, (t, s) in entries.items()], proportion)
        return 0
    tb = read_conllu(args.treebank)
    vocab = _vocab(tb)
    for name in _names(args.stats):
        spec = S.get_spec(vocab, name)
        f = S.gold_statistic(spec, tb.sentences, vocab)
        rows = [(e, float(v), None) for e, v in zip(spec.events(), f.values) if v != 0]
        _print_family(name, rows, spec.is_proportion)
    return 0


def _load_data(data: dict, args):
    def get(key):
        v = getattr(args, key, None) or data.get(key)
        return Path(v) if v else None

    labeled = read_conllu(get("labeled")).sentences if get("labeled") else []
    unlabeled = read_conllu(get("unlabeled"), "unlabeled").sentences if get("unlabeled") else []
    dev = read_conllu(get("dev")).sentences if get("dev") else []
    bundle = TG.read_bundle(get("bundle")) if get("bundle") else None
    return labeled, unlabeled, dev, bundle, get("init")


def _build_model(labeled, unlabeled, init, mcfg, seed):
    if init:
        return M.load_params(init)
    if not labeled:
        raise ValueError("training without labeled data needs --init (a checkpoint providing the tag set)")
    return M.init_params(_vocab(labeled, unlabeled), mcfg, seed)


def _overrides(pairs) -> dict:
    out = {}
    for p in pairs or []:
        if "=" not in p:
            raise UsageError(f"--set expects key=value, got {p!r}")
        k, v = p.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _run_training(cfg, mcfg, labeled, unlabeled, dev, bundle, init, log_path=None, quiet=False, stamp=""):
    params = _build_model(labeled, unlabeled, init, mcfg, cfg.seed)
    log = open(log_path, "w", encoding="utf-8") if log_path else None
    started = time.time()
    try:
        if log:
            log.write(f"# time={datetime.datetime.now().isoformat(timespec='seconds')}\n")
            if stamp:
                log.write(stamp + "\n")

        def on_record(rec):
            if log:
                log.write(T.format_record(rec) + "\n")
            if not quiet and rec["event"] in ("epoch", "final"):
                print(T.format_record(rec), file=sys.stderr)

        result = T.train(params, labeled, unlabeled, bundle, cfg, dev, on_record)
        if log:
            log.write(f"# elapsed={time.time() - started:.1f}s\n")
    finally:
        if log:
            log.close()
    return result


def cmd_train(args) -> int:
    text = Path(args.config).read_text(encoding="utf-8") if args.config else ""
    overrides = _overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    cfg, mcfg, data = T.read_config(text, overrides)
    labeled, unlabeled, dev, bundle, init = _load_data(data, args)
    result = _run_training(cfg, mcfg, labeled, unlabeled, dev, bundle, init, args.log,
                           stamp=_stamp(args, cfg.seed))
    M.save_params(result.params, args.out)
    print(_stamp(args, cfg.seed), file=sys.stderr)
    print(f"best_epoch={result.best_epoch} checkpoint={args.out} digest={M.params_digest(result.params)}")
    return 0


def cmd_evaluate(args) -> int:
    params = M.load_params(args.checkpoint)
    gold = read_conllu(args.gold).sentences
    pred = M.decode(params, gold)
    if args.pred_out:
        write_conllu(Treebank(pred), args.pred_out)
    metrics = evaluation.score(gold, pred)
    print(T.format_record(metrics))
    return 0


def cmd_ablate(args) -> int:
    text = Path(args.config).read_text(encoding="utf-8") if args.config else ""
    base_over = _overrides(args.set)
    seeds = [int(s) for s in _names(args.seeds)]
    cfg0, mcfg, data = T.read_config(text, base_over)
    labeled, unlabeled, dev, bundle, init = _load_data(data, args)
    test = read_conllu(args.test).sentences if args.test else dev
    if not test:
        raise ValueError("ablation needs --test or a dev set to score")
    runs = {}
    for name, over in ABLATIONS[args.kind]:
        runs[name] = []
        for seed in seeds:
            cfg, _, _ = T.read_config(text, {**base_over, **over, "seed": str(seed)})
            result = _run_training(cfg, mcfg, labeled, unlabeled, dev, bundle, init, quiet=True)
            metrics = evaluation.score(test, M.decode(result.params, test))
            print(f"variant={name} seed={seed} " + T.format_record(metrics), file=sys.stderr)
            runs[name].append(metrics)
    table, records = evaluation.compare_runs(runs, baseline=ABLATIONS[args.kind][0][0],
                                             metrics=evaluation.METRICS)
    print(table, end="")
    if args.records:
        Path(args.records).write_text(records, encoding="utf-8")
    print(_stamp(args, cfg0.seed), file=sys.stderr)
    return 0


def cmd_syngen(args) -> int:
    grammar = oracle.read_grammar(args.grammar) if args.grammar else oracle.parse_grammar(oracle.EXAMPLE_GRAMMAR)
    tb = oracle.syngen(grammar, args.size, args.seed)
    write_conllu(tb, args.out)
    if args.stats_out:
        TG.write_bundle(TG.from_statistics(oracle.analytic_statistics(grammar), source="analytic"),
                        args.stats_out)
    print(_stamp(args, args.seed), file=sys.stderr)
    print(f"wrote {len(tb)} sentences ({tb.n_tokens} tokens) to {args.out}")
    return 0


def cmd_oracle_check(args) -> int:
    ok = True
    for name, err in oracle.run_suite(args.instances, args.seed):
        good = err <= args.tol
        ok &= good
        print(f"{'PASS' if good else 'FAIL'} expect-vs-enumeration {name} max_err={err:.3e}")
    rng = np.random.default_rng(args.seed)
    worst = 0.0
    for n in (1, 2, 3):
        for _ in range(20):
            w = np.exp(rng.normal(size=(n, n + 1)))
            theta = treemath.from_weights(w)
            trees = oracle.arborescences(n)
            tw = np.exp(theta[0][np.arange(n), trees].sum(axis=1))
            worst = max(worst, abs(float(treemath.log_partition(theta, [n]).value[0]) - np.log(tw.sum())))
    good = worst <= 1e-9
    ok &= good
    print(f"{'PASS' if good else 'FAIL'} matrix-tree-vs-enumeration max_err={worst:.3e}")
    return 0 if ok else 1


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="esr", description="Expected statistic regularization toolkit.")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    s = sub.add_parser("estimate-targets", help="bootstrap targets and margins from labeled CoNLL-U")
    s.add_argument("--labeled", required=True)
    s.add_argument("--stats", default="CLD", help="comma-separated catalog names")
    s.add_argument("--forbidden", help="forbidden-arc list (for UNIARC)")
    s.add_argument("--k", type=int, default=8)
    s.add_argument("--B", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_estimate_targets)

    s = sub.add_parser("universal-targets", help="zero targets for a forbidden-arc list")
    s.add_argument("--forbidden", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_universal_targets)

    s = sub.add_parser("inspect-stats", help="print a bundle or a treebank's gold statistics")
    s.add_argument("--bundle")
    s.add_argument("--treebank")
    s.add_argument("--stats", default="CLD")
    s.set_defaults(func=cmd_inspect_stats)

    for name, func, hlp in (("train", cmd_train, "train a tagger-parser"),
                            ("ablate", cmd_ablate, "run a named ablation over seeds")):
        s = sub.add_parser(name, help=hlp)
        s.add_argument("--config", help="INI file with [train], [model] and [data] sections")
        s.add_argument("--labeled")
        s.add_argument("--unlabeled")
        s.add_argument("--dev")
        s.add_argument("--bundle")
        s.add_argument("--init", help="start from this checkpoint (its vocabulary is kept)")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config option")
        if name == "train":
            s.add_argument("--seed", type=int)
            s.add_argument("--out", required=True, help="checkpoint path")
            s.add_argument("--log", help="training log path")
        else:
            s.add_argument("--kind", required=True, choices=sorted(ABLATIONS))
            s.add_argument("--seeds", default="0,1,2")
            s.add_argument("--test")
            s.add_argument("--records", help="write tab-delimited summary records here")
        s.set_defaults(func=func)

    s = sub.add_parser("evaluate", help="score a checkpoint on gold CoNLL-U")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--gold", required=True)
    s.add_argument("--pred-out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("syngen", help="sample a synthetic treebank from a grammar")
    s.add_argument("--grammar", help="grammar INI file (default: built-in example)")
    s.add_argument("--size", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--stats-out", help="write analytic POS1, CLD and HCLD values as a targets bundle")
    s.set_defaults(func=cmd_syngen)

    s = sub.add_parser("oracle-check", help="compare exact expectations against enumeration")
    s.add_argument("--instances", type=int, default=200)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--tol", type=float, default=1e-10)
    s.set_defaults(func=cmd_oracle_check)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"esr: error: {e}", file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError, TreebankError) as e:
        print(f"esr: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
