"""POS accuracy, coarse LAS, and multi-run summaries."""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .treebank import Sentence, coarsen

METRICS = ("pos", "las", "avg")


class EvalError(ValueError):
    pass


def score(gold: Sequence[Sentence], pred: Sequence[Sentence]) -> dict:
    """Token-level POS accuracy, LAS over coarse labels, and their mean (all tokens count)."""
    if len(gold) != len(pred):
        raise EvalError(f"gold has {len(gold)} sentences, prediction has {len(pred)}")
    tokens = pos = las = 0
    for i, (g, p) in enumerate(zip(gold, pred)):
        if g.n != p.n:
            raise EvalError(f"sentence {i}: gold has {g.n} tokens, prediction has {p.n}")
        if not g.labeled or not p.labeled:
            raise EvalError(f"sentence {i}: both gold and prediction must be fully annotated")
        tokens += g.n
        pos += sum(a == b for a, b in zip(g.tags, p.tags))
        las += sum(gh == ph and coarsen(gl) == coarsen(pl)
                   for gh, ph, gl, pl in zip(g.heads, p.heads, g.labels, p.labels))
    if tokens == 0:
        raise EvalError("no tokens to score")
    pos_acc, las_acc = pos / tokens, las / tokens
    return {"pos": pos_acc, "las": las_acc, "avg": (pos_acc + las_acc) / 2}


def uas(gold: Sequence[Sentence], pred: Sequence[Sentence]) -> float:
    """Unlabeled attachment fraction."""
    hits = sum(gh == ph for g, p in zip(gold, pred) for gh, ph in zip(g.heads, p.heads))
    return hits / sum(g.n for g in gold)


def compare_runs(runs: Mapping[str, Sequence[dict]], baseline: str | None = None,
                 metrics: Sequence[str] | None = None) -> tuple[str, str]:
    """Mean metrics per method with deltas against ``baseline``.

    ``runs`` maps a method name to per-run metric dicts. Returns an aligned
    text table (percentages, 1 decimal) and tab-delimited records at full precision.
    """
    if not runs:
        raise EvalError("no runs to compare")
    keys = list(metrics) if metrics else sorted(next(iter(runs.values()))[0])
    means = {}
    for method, logs in runs.items():
        if not logs:
            raise EvalError(f"method {method!r} has no runs")
        for i, rec in enumerate(logs):
            missing = [k for k in keys if k not in rec]
            if missing:
                raise EvalError(f"method {method!r} run {i}: missing metrics {missing}")
        means[method] = {k: float(np.mean([rec[k] for rec in logs])) for k in keys}
    if baseline is not None and baseline not in means:
        raise EvalError(f"baseline {baseline!r} is not among the methods")
    header = ["method", "runs"] + keys + ([f"d_{k}" for k in keys] if baseline else [])
    rows, records = [], ["\t".join(header)]
    for method, vals in means.items():
        deltas = [vals[k] - means[baseline][k] for k in keys] if baseline else []
        n = len(runs[method])
        rows.append([method, str(n)] + [f"{100 * vals[k]:.1f}" for k in keys]
                    + [f"{100 * d:+.1f}" for d in deltas])
        records.append("\t".join([method, str(n)] + [format(vals[k], ".17g") for k in keys]
                                 + [format(d, ".17g") for d in deltas]))
    widths = [max(len(r[c]) for r in rows + [header]) for c in range(len(header))]
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    lines += ["  ".join(c.ljust(w) for c, w in zip(r, widths)) for r in rows]
    return "\n".join(lines) + "\n", "\n".join(records) + "\n"


def final_metrics(records: Sequence[dict], prefix: str = "dev_") -> dict:
    """Metrics of the last record carrying ``prefix``-keys, with the prefix stripped."""
    for rec in reversed(records):
        found = {k[len(prefix):]: v for k, v in rec.items() if k.startswith(prefix)}
        if found:
            return found
    raise EvalError(f"no record carries {prefix}* metrics")
