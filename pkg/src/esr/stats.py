"""Statistic families: counting functions g, batch expectations and aggregators h.

A statistic is computed in three layers. ``g`` tallies events in one
structure, the batch expectation sums ``E[g]`` over sentences, and an
aggregator turns those expected counts into proportions (joint,
conditional, or relative to the total number of arcs).

Two independent routes produce expected counts:

* :func:`count_structures` tallies events in explicit (tags, heads, labels)
  structures. It backs gold counts, Monte Carlo estimates and enumeration.
* :func:`expect` computes exact expectations from per-token marginals, using
  the independence of tags, heads and labels across tokens. It is
  differentiable.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import grad as G
from .model import MarginalSet
from .treebank import BOS, EOS, ROOT, Sentence, Vocab

DIRS = ("left", "right", "root")          # where the head sits relative to the child
LEFT, RIGHT, ROOTDIR = range(3)
DIST_BINS = ((1, 1), (2, 2), (3, 3), (4, 6), (7, 10), (11, None))
DIST_NAMES = ("1", "2", "3", "4-6", "7-10", "11+", "root")
VALENCY_BINS = ((0, 0), (1, 1), (2, 2), (3, 4), (5, None))
VALENCY_NAMES = ("0", "1", "2", "3-4", "5+")
VALENCY_CAP = 5

ARC_FIELDS = ("HEAD_TAG", "CHILD_TAG", "LABEL", "DIR", "DIST_BIN")
FAMILY_FIELDS = {
    "pos_unigram": ("TAG",),
    "pos_bigram": ("PREV_TAG", "NEXT_TAG"),
    "single_arc": ARC_FIELDS,
    "universal_arc": ("HEAD_TAG", "CHILD_TAG", "LABEL"),
    "sibling": ("HEAD_TAG", "CHILD_TAG", "SIB_TAG", "DIR", "SIB_DIR"),
    "grandchild": ("CHILD_TAG", "LABEL", "GRAND_LABEL", "DIR", "GRAND_DIR"),
    "valency": ("HEAD_TAG", "VALENCY"),
    "entropy": (),
}
ENTROPY_MODES = ("token", "edge", "tree")


class StatisticError(ValueError):
    pass


def dist_bin(d: np.ndarray) -> np.ndarray:
    """Bin index of absolute distance(s) ``d >= 1``."""
    d = np.asarray(d)
    out = np.full(d.shape, len(DIST_BINS) - 1)
    for k, (lo, hi) in reversed(list(enumerate(DIST_BINS))):
        if hi is not None:
            out = np.where((d >= lo) & (d <= hi), k, out)
    return out


def valency_bin_matrix() -> np.ndarray:
    """(VALENCY_CAP+1, n_bins) map from capped child counts to valency bins."""
    m = np.zeros((VALENCY_CAP + 1, len(VALENCY_BINS)))
    for v in range(VALENCY_CAP + 1):
        m[v, valency_bin(v)] = 1.0
    return m


_VALENCY_TABLE = np.array([
    next(k for k, (lo, hi) in enumerate(VALENCY_BINS) if v >= lo and (hi is None or v <= hi))
    for v in range(VALENCY_CAP + 1)])


def valency_bin(v) -> np.ndarray:
    return _VALENCY_TABLE[np.minimum(np.asarray(v), VALENCY_CAP)]


@dataclass(frozen=True)
class StatisticSpec:
    """One statistic family over a fixed tag/label inventory."""

    name: str
    family: str
    fields: tuple
    conditioning: tuple = ()
    tags: tuple = ()
    labels: tuple = ()
    triples: tuple = ()       # universal_arc only: (head_tag, child_tag, label)
    mode: str | None = None   # entropy only

    def __post_init__(self):
        if self.family not in FAMILY_FIELDS:
            raise StatisticError(f"unknown statistic family {self.family!r}")
        allowed = FAMILY_FIELDS[self.family]
        if any(f not in allowed for f in self.fields):
            raise StatisticError(f"{self.name}: fields {self.fields} not valid for {self.family}")
        canonical = tuple(f for f in allowed if f in self.fields)
        object.__setattr__(self, "fields", canonical)
        if not set(self.conditioning) < set(self.fields) and self.conditioning:
            raise StatisticError(f"{self.name}: conditioning {self.conditioning} must be a strict subset of fields")
        if self.family == "entropy" and self.mode not in ENTROPY_MODES:
            raise StatisticError(f"{self.name}: entropy mode must be one of {ENTROPY_MODES}")
        if self.family == "universal_arc" and self.conditioning:
            raise StatisticError("universal_arc statistics cannot be conditional")

    def domain(self, f: str) -> tuple:
        if f in ("CHILD_TAG", "SIB_TAG", "TAG"):
            return self.tags
        if f == "HEAD_TAG":
            return self.tags + (ROOT,)
        if f == "PREV_TAG":
            return self.tags + (BOS,)
        if f == "NEXT_TAG":
            return self.tags + (EOS,)
        if f in ("LABEL", "GRAND_LABEL"):
            return self.labels
        if f in ("DIR", "SIB_DIR", "GRAND_DIR"):
            return DIRS
        if f == "DIST_BIN":
            return DIST_NAMES
        if f == "VALENCY":
            return VALENCY_NAMES
        raise StatisticError(f"unknown field {f}")

    @property
    def shape(self) -> tuple:
        return tuple(len(self.domain(f)) for f in self.fields)

    @property
    def is_entropy(self) -> bool:
        return self.family == "entropy"

    @property
    def dim_f(self) -> int:
        if self.is_entropy:
            return 1
        if self.family == "universal_arc":
            return len(self.triples)
        return int(np.prod(self.shape))

    @property
    def dim_g(self) -> int:
        return self.dim_f + 1 if self.family == "universal_arc" else self.dim_f

    def events(self) -> list[tuple]:
        if self.family == "universal_arc":
            return list(self.triples)
        if self.is_entropy:
            return [(self.mode,)]
        return list(itertools.product(*(self.domain(f) for f in self.fields)))

    def index(self, event: Sequence[str]) -> int:
        if self.family == "universal_arc":
            return self.triples.index(tuple(event))
        idx = [self.domain(f).index(e) for f, e in zip(self.fields, event)]
        return int(np.ravel_multi_index(idx, self.shape))

    @property
    def is_proportion(self) -> bool:
        return not self.is_entropy and self.family != "universal_arc" and not self.conditioning

    def describe(self) -> str:
        if self.is_entropy:
            return f"entropy({self.mode})"
        body = ",".join(f for f in self.fields if f not in self.conditioning)
        if self.conditioning:
            body += "|" + ",".join(self.conditioning)
        return f"{self.family}({body})"


@dataclass
class StatisticVector:
    spec: StatisticSpec
    values: object               # G.Node or ndarray, trailing axis of length dim_f
    undefined: np.ndarray = field(default=None)   # True where the denominator was zero


def _arc(name, *fields, given=()):
    return name, "single_arc", fields, given


CATALOG_ROWS = (
    ("POS1", "pos_unigram", ("TAG",), ()),
    ("POS2", "pos_bigram", ("PREV_TAG", "NEXT_TAG"), ()),
    _arc("CLD", "CHILD_TAG", "LABEL", "DIR"),
    _arc("HCLD", "HEAD_TAG", "CHILD_TAG", "LABEL", "DIR"),
    _arc("HLD", "HEAD_TAG", "LABEL", "DIR"),
    _arc("LD", "LABEL", "DIR"),
    _arc("LDIST", "LABEL", "DIR", "DIST_BIN"),
    _arc("HCD", "HEAD_TAG", "CHILD_TAG", "DIR"),
    _arc("HLD|C", "HEAD_TAG", "CHILD_TAG", "LABEL", "DIR", given=("CHILD_TAG",)),
    _arc("LD|C", "CHILD_TAG", "LABEL", "DIR", given=("CHILD_TAG",)),
    ("SIB", "sibling", FAMILY_FIELDS["sibling"], ()),
    ("GC", "grandchild", FAMILY_FIELDS["grandchild"], ()),
    ("VAL", "valency", ("HEAD_TAG", "VALENCY"), ()),
    ("VAL|H", "valency", ("HEAD_TAG", "VALENCY"), ("HEAD_TAG",)),
)
ENTROPY_NAMES = {"token": "H_TOKEN", "edge": "H_EDGE", "tree": "H_TREE"}


def catalog(vocab: Vocab, forbidden: Iterable[tuple] | None = None) -> dict[str, StatisticSpec]:
    """Named statistic specs; ``UNIARC`` is included when a forbidden-arc list is given."""
    tags, labels = tuple(vocab.tags), tuple(vocab.labels)
    out = {}
    for name, family, fields, given in CATALOG_ROWS:
        out[name] = StatisticSpec(name, family, tuple(fields), tuple(given), tags, labels)
    if forbidden is not None:
        out["UNIARC"] = universal_spec(vocab, forbidden)
    for mode, name in ENTROPY_NAMES.items():
        out[name] = StatisticSpec(name, "entropy", (), (), tags, labels, mode=mode)
    return out


def get_spec(vocab: Vocab, name: str, forbidden=None) -> StatisticSpec:
    specs = catalog(vocab, forbidden)
    if name not in specs:
        raise StatisticError(f"unknown statistic {name!r}; known: {sorted(specs)}")
    return specs[name]


def universal_spec(vocab: Vocab, triples: Iterable[tuple], name: str = "UNIARC") -> StatisticSpec:
    return StatisticSpec(name, "universal_arc", FAMILY_FIELDS["universal_arc"], (),
                         tuple(vocab.tags), tuple(vocab.labels), tuple(tuple(t) for t in triples))


def read_forbidden(path) -> list[tuple]:
    """``HEAD_TAG CHILD_TAG LABEL`` per line; '#' starts a comment. Duplicates are kept."""
    triples = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 3:
                raise StatisticError(f"{path}:{lineno}: expected 'HEAD_TAG CHILD_TAG LABEL'")
            triples.append(tuple(parts))
    return triples


# ---------------------------------------------------------------- counting route

def _arc_event_arrays(tags, heads, labels):
    """Per-token event coordinates for (S, n) structure arrays."""
    n = tags.shape[1]
    pos = np.arange(1, n + 1)[None, :]
    is_root = heads == 0
    safe = np.where(is_root, 1, heads) - 1
    head_tag = np.take_along_axis(tags, safe, axis=1)
    direction = np.where(is_root, ROOTDIR, np.where(heads > pos, RIGHT, LEFT))
    dist = np.where(is_root, len(DIST_BINS), dist_bin(np.abs(heads - pos).clip(min=1)))
    return dict(HEAD_TAG=(head_tag, is_root), CHILD_TAG=tags, LABEL=labels, DIR=direction,
                DIST_BIN=dist)


def count_structures(spec: StatisticSpec, tags, heads, labels, weights=None) -> np.ndarray:
    """Event counts ``g`` for explicit structures.

    ``tags``, ``heads`` (0 = ROOT, 1-based) and ``labels`` are (S, n) integer
    arrays. Returns (S, dim_g), or the ``weights``-weighted sum (dim_g,).
    """
    tags, heads, labels = (np.atleast_2d(np.asarray(a, dtype=np.int64)) for a in (tags, heads, labels))
    S, n = tags.shape
    T = len(spec.tags)
    out = np.zeros((S, spec.dim_g))
    fam = spec.family
    rows = np.repeat(np.arange(S), n).reshape(S, n)

    def tally(row_idx, coords, fields, mask=None):
        idx = np.ravel_multi_index(tuple(coords[f] for f in fields),
                                   tuple(len(spec.domain(f)) for f in fields))
        if mask is not None:
            row_idx, idx = row_idx[mask], idx[mask]
        np.add.at(out, (row_idx.ravel(), idx.ravel()), 1.0)

    if fam == "pos_unigram":
        tally(rows, {"TAG": tags}, spec.fields)
    elif fam == "pos_bigram":
        prev = np.concatenate([np.full((S, 1), T), tags], axis=1)
        nxt = np.concatenate([tags, np.full((S, 1), T)], axis=1)
        r = np.repeat(np.arange(S), n + 1).reshape(S, n + 1)
        tally(r, {"PREV_TAG": prev, "NEXT_TAG": nxt}, spec.fields)
    elif fam in ("single_arc", "universal_arc"):
        ev = _arc_event_arrays(tags, heads, labels)
        ht, is_root = ev["HEAD_TAG"]
        ev["HEAD_TAG"] = np.where(is_root, T, ht)
        if fam == "single_arc":
            tally(rows, ev, spec.fields)
        else:
            lookup = _universal_lookup(spec)
            full = np.ravel_multi_index((ev["HEAD_TAG"], ev["CHILD_TAG"], ev["LABEL"]),
                                        (T + 1, T, len(spec.labels)))
            hit = lookup[full]
            keep = hit >= 0
            np.add.at(out, (rows[keep], hit[keep]), 1.0)
            out[:, -1] = n
    elif fam == "sibling":
        ev = _arc_event_arrays(tags, heads, labels)
        ht, is_root = ev["HEAD_TAG"]
        ht = np.where(is_root, T, ht)
        j, k = np.triu_indices(n, 1)
        same = heads[:, j] == heads[:, k]
        coords = {"HEAD_TAG": ht[:, j], "CHILD_TAG": tags[:, j], "SIB_TAG": tags[:, k],
                  "DIR": ev["DIR"][:, j], "SIB_DIR": ev["DIR"][:, k]}
        r = np.repeat(np.arange(S), len(j)).reshape(S, len(j))
        if len(j):
            tally(r, coords, spec.fields, same)
    elif fam == "grandchild":
        ev = _arc_event_arrays(tags, heads, labels)
        has_mid = heads > 0
        mid = np.where(has_mid, heads, 1) - 1
        coords = {"CHILD_TAG": np.take_along_axis(tags, mid, 1),
                  "LABEL": np.take_along_axis(labels, mid, 1),
                  "GRAND_LABEL": labels,
                  "DIR": np.take_along_axis(ev["DIR"], mid, 1),
                  "GRAND_DIR": ev["DIR"]}
        tally(rows, coords, spec.fields, has_mid)
    elif fam == "valency":
        hpos = np.arange(n + 1)
        counts = (heads[:, :, None] == hpos[None, None, :]).sum(axis=1)   # (S, n+1)
        htag = np.concatenate([np.full((S, 1), T), tags], axis=1)
        r = np.repeat(np.arange(S), n + 1).reshape(S, n + 1)
        tally(r, {"HEAD_TAG": htag, "VALENCY": valency_bin(counts)}, spec.fields)
    else:
        raise StatisticError(f"{spec.name}: no counting function for family {fam}")
    if weights is not None:
        return np.asarray(weights) @ out
    return out


def _universal_lookup(spec: StatisticSpec) -> np.ndarray:
    T, R = len(spec.tags), len(spec.labels)
    lookup = np.full((T + 1) * T * R, -1, dtype=np.int64)
    heads_dom, tag_dom = spec.tags + (ROOT,), spec.tags
    for k, (h, c, r) in enumerate(spec.triples):
        if h in heads_dom and c in tag_dom and r in spec.labels:
            idx = np.ravel_multi_index((heads_dom.index(h), tag_dom.index(c), spec.labels.index(r)),
                                       (T + 1, T, R))
            if lookup[idx] < 0:
                lookup[idx] = k
    return lookup


def encode_structure(s: Sentence, vocab: Vocab) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return vocab.tag_ids(s.tags), np.array(s.heads, dtype=np.int64), vocab.label_ids(s.labels)


def gold_counts(spec: StatisticSpec, sentences: Sequence[Sentence], vocab: Vocab) -> np.ndarray:
    """(m, dim_g) per-sentence event counts of gold structures."""
    _check_vocab(spec, vocab)
    out = np.zeros((len(sentences), spec.dim_g))
    for i, s in enumerate(sentences):
        if not s.labeled:
            raise StatisticError(f"sentence {s.sent_id} is not labeled")
        t, h, r = encode_structure(s, vocab)
        out[i] = count_structures(spec, t[None], h[None], r[None])[0]
    return out


def count_gold(spec: StatisticSpec, sentences: Sequence[Sentence], vocab: Vocab) -> np.ndarray:
    """Summed gold event counts over a batch (zero vector for an empty batch)."""
    if not sentences:
        return np.zeros(spec.dim_g)
    return gold_counts(spec, sentences, vocab).sum(axis=0)


def _check_vocab(spec: StatisticSpec, vocab: Vocab):
    if tuple(vocab.tags) != spec.tags or tuple(vocab.labels) != spec.labels:
        raise StatisticError(f"{spec.name}: vocabulary does not match the statistic spec")


# ---------------------------------------------------------------- exact route

_DIR_CACHE: dict = {}


def _geometry(N: int) -> tuple[np.ndarray, np.ndarray]:
    """Direction (N, N+1, 3) and distance-bin (N, N+1, 7) one-hots for child i, head column j."""
    if N not in _DIR_CACHE:
        i = np.arange(1, N + 1)[:, None]
        j = np.arange(N + 1)[None, :]
        d = np.where(j == 0, ROOTDIR, np.where(j > i, RIGHT, LEFT))
        b = np.where(j == 0, len(DIST_BINS), dist_bin(np.abs(j - i).clip(min=1)))
        _DIR_CACHE[N] = (np.eye(3)[d], np.eye(len(DIST_NAMES))[b])
    return _DIR_CACHE[N]


def _head_tags(m: MarginalSet) -> G.Node:
    """(B, N+1, T+1): distribution of the tag at each head column, ROOT at column 0."""
    B, N, T = m.tag.shape
    padded = G.concatenate([m.tag, np.zeros((B, N, 1))], axis=2)
    root = np.zeros((B, 1, T + 1))
    root[:, 0, T] = 1.0
    return G.concatenate([root, padded], axis=1)


def _check_marginals(spec: StatisticSpec, m: MarginalSet):
    if m.n_tags != len(spec.tags) or m.n_labels != len(spec.labels):
        raise StatisticError(
            f"{spec.name}: marginals have {m.n_tags} tags/{m.n_labels} labels, "
            f"spec expects {len(spec.tags)}/{len(spec.labels)}")


def expect(spec: StatisticSpec, m: MarginalSet, per_sentence: bool = False) -> G.Node:
    """Exact expected counts ``g-bar`` under independent-head marginals.

    Returns a Node of shape (dim_g,), or (B, dim_g) with ``per_sentence``.
    """
    _check_marginals(spec, m)
    fam = spec.family
    B, N, T = m.tag.shape
    out = "b" if per_sentence else ""
    fields = spec.fields
    if fam == "pos_unigram":
        g = G.einsum(f"bic->{out}c", m.tag)
    elif fam == "pos_bigram":
        g = _expect_bigram(m, out)
    elif fam == "single_arc":
        g = _expect_arc(m, fields, out)
    elif fam == "universal_arc":
        full = _expect_arc(m, ("HEAD_TAG", "CHILD_TAG", "LABEL"), out)
        lead = (B,) if per_sentence else ()
        flat = G.reshape(full, lead + (-1,))
        flat = G.concatenate([flat, np.zeros(lead + (1,))], axis=-1)
        # unknown symbols point at the appended zero column
        idx = np.full(len(spec.triples), (T + 1) * T * len(spec.labels))
        heads_dom = spec.tags + (ROOT,)
        for k, (h, c, r) in enumerate(spec.triples):
            if h in heads_dom and c in spec.tags and r in spec.labels:
                idx[k] = np.ravel_multi_index(
                    (heads_dom.index(h), spec.tags.index(c), spec.labels.index(r)),
                    (T + 1, T, len(spec.labels)))
        picked = flat[..., idx] if per_sentence else flat[idx]
        total = G.einsum(f"bij->{out}", m.head)
        total = G.expand_dims(total, -1)
        g = G.concatenate([picked, total], axis=-1)
    elif fam == "sibling":
        g = _expect_sibling(m, fields, out)
    elif fam == "grandchild":
        g = _expect_grandchild(m, fields, out)
    elif fam == "valency":
        g = _expect_valency(m, fields, out)
    else:
        raise StatisticError(f"{spec.name}: {fam} statistics have no count expectation")
    lead = (B,) if per_sentence else ()
    return G.reshape(g, lead + (spec.dim_g,))


def _expect_bigram(m: MarginalSet, out: str) -> G.Node:
    B, N, T = m.tag.shape
    tag_pad = G.concatenate([m.tag, np.zeros((B, N, 1))], axis=2)           # (B, N, T+1)
    bos = np.zeros((B, 1, T + 1))
    bos[:, 0, T] = 1.0
    prev = G.concatenate([bos, tag_pad], axis=1)                           # positions 0..N
    eos = np.zeros((B, N + 1, T + 1))
    eos[np.arange(B), m.lengths, T] = 1.0
    nxt = G.concatenate([tag_pad, np.zeros((B, 1, T + 1))], axis=1) + eos
    return G.einsum(f"bpx,bpy->{out}xy", prev, nxt)


def _expect_arc(m: MarginalSet, fields, out: str) -> G.Node:
    B, N, T = m.tag.shape
    dirs, dists = _geometry(N)
    ops, subs = [m.head], ["bij"]
    letters = {"HEAD_TAG": "h", "CHILD_TAG": "c", "LABEL": "l", "DIR": "d", "DIST_BIN": "k"}
    if "LABEL" in fields:
        ops.append(m.label), subs.append("bijl")
    if "HEAD_TAG" in fields:
        ops.append(_head_tags(m)), subs.append("bjh")
    if "CHILD_TAG" in fields:
        ops.append(m.tag), subs.append("bic")
    if "DIR" in fields:
        ops.append(dirs), subs.append("ijd")
    if "DIST_BIN" in fields:
        ops.append(dists), subs.append("ijk")
    target = out + "".join(letters[f] for f in fields)
    return G.einsum(",".join(subs) + "->" + target, *ops)


def _expect_sibling(m: MarginalSet, fields, out: str) -> G.Node:
    """Pairs j < k of children sharing head column h; heads are independent across tokens."""
    B, N, T = m.tag.shape
    dirs, _ = _geometry(N)
    upper = np.triu(np.ones((N, N)), 1)
    ops, subs = [m.head, m.head, upper], ["bjh", "bkh", "jk"]
    if "HEAD_TAG" in fields:
        ops.append(_head_tags(m)), subs.append("bhx")
    if "CHILD_TAG" in fields:
        ops.append(m.tag), subs.append("bjy")
    if "SIB_TAG" in fields:
        ops.append(m.tag), subs.append("bkz")
    if "DIR" in fields:
        ops.append(dirs), subs.append("jhd")
    if "SIB_DIR" in fields:
        ops.append(dirs), subs.append("khe")
    letters = {"HEAD_TAG": "x", "CHILD_TAG": "y", "SIB_TAG": "z", "DIR": "d", "SIB_DIR": "e"}
    return G.einsum(",".join(subs) + "->" + out + "".join(letters[f] for f in fields), *ops)


def _expect_grandchild(m: MarginalSet, fields, out: str) -> G.Node:
    """Chains g -> m -> c: m's arc to any head, then c's arc to token m."""
    B, N, T = m.tag.shape
    dirs, _ = _geometry(N)
    inner = m.head[:, :, 1:]                 # (B, c, m): child c attached to token m
    ops, subs = [m.head, inner], ["bmg", "bcm"]
    if "CHILD_TAG" in fields:
        ops.append(m.tag), subs.append("bmt")
    if "LABEL" in fields:
        ops.append(m.label), subs.append("bmga")
    if "GRAND_LABEL" in fields:
        ops.append(m.label[:, :, 1:, :]), subs.append("bcmr")
    if "DIR" in fields:
        ops.append(dirs), subs.append("mgd")
    if "GRAND_DIR" in fields:
        ops.append(dirs[:, 1:, :]), subs.append("cme")
    letters = {"CHILD_TAG": "t", "LABEL": "a", "GRAND_LABEL": "r", "DIR": "d", "GRAND_DIR": "e"}
    return G.einsum(",".join(subs) + "->" + out + "".join(letters[f] for f in fields), *ops)


def valency_pmf(head: G.Node) -> G.Node:
    """(B, N+1, VALENCY_CAP+1) Poisson-binomial pmf of child counts per head column.

    Children attach independently, child i to column h with probability
    ``head[b, i, h]``; counts at or above the cap share the last bucket.
    """
    B, N, N1 = head.shape
    C = VALENCY_CAP + 1
    init = np.zeros((B, N1, C))
    init[:, :, 0] = 1.0
    dp = G.Node(init)
    zero = np.zeros((B, N1, 1))
    for i in range(N):
        p = G.broadcast_to(G.expand_dims(head[:, i, :], -1), (B, N1, C))
        moved = G.concatenate([zero, dp[:, :, :C - 2], dp[:, :, C - 2:C - 1] + dp[:, :, C - 1:]], axis=2)
        dp = dp * (1.0 - p) + moved * p
    return dp


def _expect_valency(m: MarginalSet, fields, out: str) -> G.Node:
    B, N, T = m.tag.shape
    binned = G.einsum("bhv,vk->bhk", valency_pmf(m.head), valency_bin_matrix())
    if "HEAD_TAG" in fields:
        ops, subs = [_head_tags(m), binned], ["bhx", "bhk"]
    else:
        valid = (np.arange(N + 1)[None, :] <= m.lengths[:, None]).astype(np.float64)
        ops, subs = [valid, binned], ["bh", "bhk"]
    letters = {"HEAD_TAG": "x", "VALENCY": "k"}
    return G.einsum(",".join(subs) + "->" + out + "".join(letters[f] for f in fields), *ops)


# ---------------------------------------------------------------- aggregation

def aggregate(spec: StatisticSpec, gbar) -> StatisticVector:
    """Map expected counts (..., dim_g) to statistic values (..., dim_f).

    Zero denominators give 0 and are flagged in ``undefined``.
    """
    is_array = not isinstance(gbar, G.Node)
    g = G.const(np.asarray(gbar, dtype=np.float64)) if is_array else gbar
    if spec.is_entropy:
        raise StatisticError(f"{spec.name}: entropy statistics are not aggregated from counts")
    if g.shape[-1] != spec.dim_g:
        raise StatisticError(f"{spec.name}: expected {spec.dim_g} counts, got {g.shape[-1]}")
    if np.any(g.value < -1e-12):
        raise StatisticError(f"{spec.name}: negative expected count")
    lead = g.shape[:-1]
    if spec.family == "universal_arc":
        d = spec.dim_f
        num = g[..., :d]
        den = G.broadcast_to(g[..., d:], lead + (d,))
    elif not spec.conditioning:
        num = g
        den = G.broadcast_to(G.sum(g, axis=-1, keepdims=True), g.shape)
    else:
        shaped = G.reshape(g, lead + spec.shape)
        off = len(lead)
        summed = tuple(off + k for k, f in enumerate(spec.fields) if f not in spec.conditioning)
        den = G.broadcast_to(G.sum(shaped, axis=summed, keepdims=True), shaped.shape)
        den = G.reshape(den, g.shape)
        num = g
    zero = den.value <= 0
    f = G.where(zero, 0.0, G.div(num, G.where(zero, 1.0, den)))
    return StatisticVector(spec, f.value if is_array else f, zero)


def statistic(spec: StatisticSpec, m: MarginalSet, per_sentence: bool = False) -> StatisticVector:
    if spec.is_entropy:
        return StatisticVector(spec, G.reshape(entropy_stats(m, spec.mode), (1,)), np.zeros(1, bool))
    return aggregate(spec, expect(spec, m, per_sentence))


def gold_statistic(spec: StatisticSpec, sentences: Sequence[Sentence], vocab: Vocab) -> StatisticVector:
    return aggregate(spec, count_gold(spec, sentences, vocab))


# ---------------------------------------------------------------- entropies

def entropy_stats(m: MarginalSet, mode: str) -> G.Node:
    """Mean tag entropy per token, head entropy per token, or tree entropy per sentence."""
    n_tokens = float(np.sum(m.lengths))
    if mode == "token":
        lt = m.log_tag if m.log_tag is not None else G.log(m.tag)
        return -G.sum(m.tag * G.where(np.broadcast_to(m.token_mask[..., None], m.tag.shape).astype(bool),
                                      lt, 0.0)) * (1.0 / n_tokens)
    if mode == "edge":
        lh = m.log_head if m.log_head is not None else G.log(m.head)
        return -G.sum(m.head * G.where(m.head_mask, lh, 0.0)) * (1.0 / n_tokens)
    if mode == "tree":
        from .treemath import guarded_tree_entropy
        _, lh, _ = m.masked_logs()
        H, kept = guarded_tree_entropy(lh, m.lengths)
        return G.sum(H) * (1.0 / max(int(kept.sum()), 1))
    raise StatisticError(f"unknown entropy mode {mode!r}")
