"""Bootstrap targets and margins, and the targets bundle file format."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import stats as S
from .treebank import Sentence, Vocab

FORMAT_VERSION = 1
HEADER_KEYS = ("version", "k", "B", "seed", "source")


class TargetsError(ValueError):
    pass


@dataclass
class TargetsBundle:
    """Per-family targets ``t`` and margins ``sigma`` with estimation metadata.

    ``entries[family][event] = (t, sigma)``; events not listed mean (0, 0).
    """

    entries: dict = field(default_factory=dict)
    k: int = 0
    B: int = 0
    seed: int = 0
    source: str = ""
    version: int = FORMAT_VERSION

    @property
    def families(self) -> list[str]:
        return list(self.entries)

    def spec(self, name: str, vocab: Vocab) -> S.StatisticSpec:
        """The statistic spec a family id refers to."""
        if name not in self.entries:
            raise TargetsError(f"bundle has no family {name!r}")
        if name == "UNIARC" or name.startswith("UNIARC"):
            return S.universal_spec(vocab, list(self.entries[name]), name)
        return S.get_spec(vocab, name)

    def specs(self, vocab: Vocab) -> dict[str, S.StatisticSpec]:
        return {name: self.spec(name, vocab) for name in self.entries}

    def dense(self, spec: S.StatisticSpec) -> tuple[np.ndarray, np.ndarray]:
        """(t, sigma) vectors of length dim_f in the spec's event order."""
        if spec.name not in self.entries:
            raise TargetsError(f"bundle has no family {spec.name!r}")
        t, sigma = np.zeros(spec.dim_f), np.zeros(spec.dim_f)
        for event, (tv, sv) in self.entries[spec.name].items():
            try:
                i = spec.index(event)
            except ValueError:
                raise TargetsError(f"{spec.name}: event {event} is not in the statistic's domain") from None
            t[i], sigma[i] = tv, sv
        return t, sigma

    def __eq__(self, other):
        if not isinstance(other, TargetsBundle):
            return NotImplemented
        return (self.entries == other.entries and self.k == other.k and self.B == other.B
                and self.seed == other.seed and self.source == other.source
                and self.version == other.version)


def _welford(rows: Iterable[tuple[np.ndarray, np.ndarray]], d: int):
    """Masked running mean and B-1 variance; rows that are all identical give sigma exactly 0."""
    count = np.zeros(d)
    mean = np.zeros(d)
    m2 = np.zeros(d)
    for x, ok in rows:
        count += ok
        delta = np.where(ok, x - mean, 0.0)
        mean += np.where(ok, delta / np.maximum(count, 1), 0.0)
        m2 += np.where(ok, delta * (x - mean), 0.0)
    var = np.where(count > 1, m2 / np.maximum(count - 1, 1), 0.0)
    return mean, np.sqrt(np.maximum(var, 0.0))


def bootstrap(specs: Sequence[S.StatisticSpec], labeled: Sequence[Sentence], vocab: Vocab,
              k: int = 8, B: int = 1000, seed: int = 0, source: str = "") -> TargetsBundle:
    """Targets as bootstrap means and margins as bootstrap standard deviations.

    All families share the same ``B`` minibatches of ``k`` sentences drawn
    uniformly with replacement. Replicates where a conditional denominator is
    zero are left out of that component's mean and deviation.
    """
    labeled = list(labeled)
    if not labeled:
        raise TargetsError("bootstrap needs at least one labeled sentence")
    if k < 1:
        raise TargetsError(f"batch size k must be >= 1, got {k}")
    if B < 2:
        raise TargetsError(f"bootstrap count B must be >= 2, got {B}")
    rng = np.random.default_rng(seed)
    draws = rng.integers(0, len(labeled), size=(B, k))
    bundle = TargetsBundle(k=k, B=B, seed=seed, source=source)
    for spec in specs:
        if spec.is_entropy:
            continue
        per_sentence = S.gold_counts(spec, labeled, vocab)

        def rows():
            for b in range(B):
                v = S.aggregate(spec, per_sentence[draws[b]].sum(axis=0))
                yield np.asarray(v.values), ~v.undefined

        t, sigma = _welford(rows(), spec.dim_f)
        bundle.entries[spec.name] = _entries(spec, t, sigma)
    return bundle


def _entries(spec: S.StatisticSpec, t: np.ndarray, sigma: np.ndarray) -> dict:
    keep_all = spec.family == "universal_arc"
    return {e: (float(t[i]), float(sigma[i])) for i, e in enumerate(spec.events())
            if keep_all or t[i] != 0 or sigma[i] != 0}


def universal_targets(triples: Iterable[tuple], source: str = "", name: str = "UNIARC") -> TargetsBundle:
    """Zero target and zero margin for every forbidden (head tag, child tag, label) triple."""
    seen = {}
    for t in triples:
        t = tuple(t)
        if t in seen:
            warnings.warn(f"duplicate forbidden triple {' '.join(t)} ignored", stacklevel=2)
            continue
        seen[t] = (0.0, 0.0)
    return TargetsBundle({name: seen}, source=source)


def from_statistics(values: dict, source: str = "", sigma: float = 0.0) -> TargetsBundle:
    """Bundle from known values ``{family: {event: t}}`` (e.g. analytic grammar statistics)."""
    return TargetsBundle({fam: {tuple(e): (float(v), float(sigma)) for e, v in ev.items()}
                          for fam, ev in values.items()}, source=source)


def merge(*bundles: TargetsBundle) -> TargetsBundle:
    """Union of families; metadata comes from the first bundle."""
    out = TargetsBundle(k=bundles[0].k, B=bundles[0].B, seed=bundles[0].seed,
                        source=bundles[0].source)
    for b in bundles:
        for fam, ev in b.entries.items():
            if fam in out.entries:
                raise TargetsError(f"family {fam!r} appears in more than one bundle")
            out.entries[fam] = dict(ev)
    return out


# ---------------------------------------------------------------- file format

def _num(x: float) -> str:
    return format(float(x), ".17g")


def format_bundle(bundle: TargetsBundle) -> str:
    lines = [f"version\t{bundle.version}", f"k\t{bundle.k}", f"B\t{bundle.B}",
             f"seed\t{bundle.seed}", f"source\t{bundle.source}"]
    lines += [f"family\t{fam}" for fam in bundle.entries]
    for fam, ev in bundle.entries.items():
        for event, (t, s) in ev.items():
            lines.append(f"{fam}\t{' '.join(event)}\t{_num(t)}\t{_num(s)}")
    return "\n".join(lines) + "\n"


def write_bundle(bundle: TargetsBundle, path) -> None:
    Path(path).write_text(format_bundle(bundle), encoding="utf-8")


def parse_bundle(text: str, source: str = "<bundle>") -> TargetsBundle:
    header, entries = {}, {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) == 2 and cols[0] in HEADER_KEYS:
            header[cols[0]] = cols[1]
        elif len(cols) == 2 and cols[0] == "family":
            entries.setdefault(cols[1], {})
        elif len(cols) == 4:
            fam, event, t, s = cols
            try:
                t, s = float(t), float(s)
            except ValueError:
                raise TargetsError(f"{source}:{lineno}: non-numeric target or margin") from None
            if s < 0 or not np.isfinite(t) or not np.isfinite(s):
                raise TargetsError(f"{source}:{lineno}: margins must be finite and >= 0")
            entries.setdefault(fam, {})[tuple(event.split(" "))] = (t, s)
        else:
            raise TargetsError(f"{source}:{lineno}: expected 'key<TAB>value' or "
                               f"'family<TAB>event<TAB>t<TAB>sigma'")
    missing = [k for k in HEADER_KEYS if k not in header]
    if missing:
        raise TargetsError(f"{source}: missing header lines {missing}")
    if int(header["version"]) != FORMAT_VERSION:
        raise TargetsError(f"{source}: unsupported bundle version {header['version']}")
    return TargetsBundle(entries, int(header["k"]), int(header["B"]), int(header["seed"]),
                         header["source"], int(header["version"]))


def read_bundle(path) -> TargetsBundle:
    return parse_bundle(Path(path).read_text(encoding="utf-8"), str(path))
