"""Ground truth for the statistic machinery.

Brute-force enumeration of every structure of a tiny sentence, random small
instances to compare against, and a synthetic treebank generator whose
statistics are known in closed form.
"""

from __future__ import annotations

import configparser
import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import stats as S
from .model import MarginalSet
from .treebank import ROOT, Sentence, Treebank, Vocab

MAX_N, MAX_T, MAX_R = 4, 3, 2


class OracleError(ValueError):
    pass


@dataclass
class Enumeration:
    """All structures of one sentence: (S, n) index arrays and their probabilities."""

    tags: np.ndarray
    heads: np.ndarray
    labels: np.ndarray
    probs: np.ndarray

    def __len__(self):
        return len(self.probs)


def arborescences(n: int) -> np.ndarray:
    """(K, n) head vectors of every single-root arborescence over tokens 1..n."""
    out = []
    for heads in itertools.product(range(n + 1), repeat=n):
        if any(h == i for i, h in enumerate(heads, start=1)) or heads.count(0) != 1:
            continue
        ok = True
        for start in range(1, n + 1):
            node, steps = start, 0
            while node and steps <= n:
                node, steps = heads[node - 1], steps + 1
            ok &= node == 0
        if ok:
            out.append(heads)
    return np.array(out, dtype=np.int64).reshape(-1, n)


def _single(m: MarginalSet) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if m.batch_size != 1:
        raise OracleError("enumeration works on one sentence at a time")
    return m.sentence(0)


def _check_caps(n: int, T: int, R: int):
    if n > MAX_N or T > MAX_T or R > MAX_R:
        raise OracleError(f"enumeration cap exceeded: n={n} (max {MAX_N}), |T|={T} (max {MAX_T}), "
                          f"|R|={R} (max {MAX_R})")


def enumerate_structures(m: MarginalSet, mode: str = "independent") -> Enumeration:
    """Every (tags, heads, labels) with its probability under the factorized model.

    ``tree`` mode keeps only single-root arborescences and renormalizes the
    head distribution over them.
    """
    tag, head, label = _single(m)
    n, T = tag.shape
    R = label.shape[2]
    _check_caps(n, T, R)
    if mode == "independent":
        head_sets = np.array(list(itertools.product(range(n + 1), repeat=n)), dtype=np.int64)
        head_sets = head_sets[(head_sets != np.arange(1, n + 1)).all(axis=1)]
    elif mode == "tree":
        head_sets = arborescences(n)
    else:
        raise OracleError(f"unknown mode {mode!r}")
    tok = np.arange(n)
    head_p = head[tok, head_sets].prod(axis=1)
    if mode == "tree":
        head_p = head_p / head_p.sum()
    tag_sets = np.array(list(itertools.product(range(T), repeat=n)), dtype=np.int64).reshape(-1, n)
    lab_sets = np.array(list(itertools.product(range(R), repeat=n)), dtype=np.int64).reshape(-1, n)
    tag_p = tag[tok, tag_sets].prod(axis=1)
    H, Tn, Rn = len(head_sets), len(tag_sets), len(lab_sets)
    hi, ti, li = (a.ravel() for a in np.meshgrid(np.arange(H), np.arange(Tn), np.arange(Rn), indexing="ij"))
    heads, labels = head_sets[hi], lab_sets[li]
    lab_p = label[tok, heads, labels].prod(axis=1)
    return Enumeration(tag_sets[ti], heads, labels, head_p[hi] * tag_p[ti] * lab_p)


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def oracle_entropy(m: MarginalSet, mode: str) -> float:
    """Entropy statistics from enumerated distributions."""
    tag, head, _ = _single(m)
    n = tag.shape[0]
    if mode == "tree":
        trees = arborescences(n)
        w = head[np.arange(n), trees].prod(axis=1)
        return _entropy(w / w.sum())
    e = enumerate_structures(m, "independent")
    total = 0.0
    for i in range(n):
        values = e.tags[:, i] if mode == "token" else e.heads[:, i]
        size = tag.shape[1] if mode == "token" else n + 1
        total += _entropy(np.bincount(values, weights=e.probs, minlength=size))
    return total / n


def oracle_counts(spec: S.StatisticSpec, m: MarginalSet, mode: str = "independent") -> np.ndarray:
    """Expected event counts by summing probability-weighted tallies."""
    e = enumerate_structures(m, mode)
    return S.count_structures(spec, e.tags, e.heads, e.labels, weights=e.probs)


def oracle_expect(spec: S.StatisticSpec, m: MarginalSet, mode: str = "independent") -> np.ndarray:
    """Exact statistic ``f`` by enumeration: ``h`` applied to the enumerated expected counts."""
    if spec.is_entropy:
        return np.array([oracle_entropy(m, spec.mode)])
    return np.asarray(S.aggregate(spec, oracle_counts(spec, m, mode)).values)


def random_marginals(rng: np.random.Generator, lengths, T: int, R: int,
                     concentration: float = 1.0) -> MarginalSet:
    """Dirichlet-random marginals with zero self-head probability."""
    out = []
    for n in lengths:
        tag = rng.dirichlet(np.full(T, concentration), size=n)
        head = np.zeros((n, n + 1))
        for i in range(n):
            allowed = [j for j in range(n + 1) if j != i + 1]
            head[i, allowed] = rng.dirichlet(np.full(len(allowed), concentration))
        label = rng.dirichlet(np.full(R, concentration), size=(n, n + 1))
        out.append((tag, head, label))
    return MarginalSet.from_arrays(out)


def one_hot_marginals(tags, heads, labels, T: int, R: int) -> MarginalSet:
    """Marginals concentrated on one structure; every candidate head gets the gold label."""
    n = len(tags)
    tag = np.eye(T)[np.asarray(tags)]
    head = np.eye(n + 1)[np.asarray(heads)]
    label = np.broadcast_to(np.eye(R)[np.asarray(labels)][:, None, :], (n, n + 1, R)).copy()
    return MarginalSet.from_arrays([(tag, head, label)])


def random_instance(seed: int, max_n: int = 3, T: int = 3, R: int = 2):
    """A (vocab, single-sentence marginals) pair for oracle comparisons."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, max_n + 1))
    vocab = Vocab(tuple(f"T{i}" for i in range(T)), tuple(f"r{i}" for i in range(R)))
    conc = float(rng.choice([0.3, 1.0, 3.0]))
    return vocab, random_marginals(rng, [n], T, R, conc)


def oracle_specs(vocab: Vocab, rng: np.random.Generator | None = None) -> dict:
    """Full catalog plus a random universal-arc list over the vocabulary."""
    rng = rng or np.random.default_rng(0)
    everything = list(itertools.product(vocab.tags + (ROOT,), vocab.tags, vocab.labels))
    pick = rng.choice(len(everything), size=min(5, len(everything)), replace=False)
    return S.catalog(vocab, [everything[i] for i in sorted(pick)])


def run_suite(instances: int = 200, seed: int = 0) -> list[tuple[str, float]]:
    """Max |expect - oracle| per catalog family over random instances (f and g-bar)."""
    worst: dict = {}
    for k in range(instances):
        vocab, m = random_instance(seed + k)
        for name, spec in oracle_specs(vocab, np.random.default_rng(seed + k)).items():
            if spec.is_entropy:
                got = float(S.entropy_stats(m, spec.mode).value)
                err = abs(got - oracle_entropy(m, spec.mode))
            else:
                g = S.expect(spec, m).value
                err = float(np.max(np.abs(g - oracle_counts(spec, m)), initial=0.0))
                f = S.aggregate(spec, g).values
                err = max(err, float(np.max(np.abs(f - oracle_expect(spec, m)), initial=0.0)))
            worst[name] = max(worst.get(name, 0.0), err)
    return sorted(worst.items())


# ---------------------------------------------------------------- synthetic grammars

@dataclass
class Grammar:
    """Head-outward branching grammar.

    Each head of tag ``a`` draws children on each side independently: another
    child follows with probability ``cont[a, side]`` (geometric count), its tag
    from ``child[a, side]`` and its label from ``label[a, child_tag, side]``.
    Children nearer the head are generated first, so attachment distance
    decays geometrically with the continuation probabilities.
    """

    tags: tuple
    labels: tuple
    root_label: str
    root: np.ndarray            # (T,)
    cont: np.ndarray            # (T, 2) side 0 = left, 1 = right
    child: np.ndarray           # (T, 2, T)
    label: np.ndarray           # (T, T, 2, R)
    words_per_tag: int = 20
    ambiguity: float = 0.0
    max_length: int = 60

    def mean_matrix(self) -> np.ndarray:
        """M[a, b]: expected number of tag-b children of a tag-a head."""
        per_side = self.cont / (1.0 - self.cont)
        return np.einsum("as,asb->ab", per_side, self.child)

    def expected_tag_counts(self) -> np.ndarray:
        M = self.mean_matrix()
        return self.root @ np.linalg.inv(np.eye(len(self.tags)) - M)

    def vocab(self) -> Vocab:
        return Vocab(tuple(sorted(self.tags)), tuple(sorted(set(self.labels) | {self.root_label})))

    def lexicon(self) -> dict:
        return {t: [f"{t.lower()}{i}" for i in range(self.words_per_tag)] for t in self.tags}


def _parse_dist(text: str, domain, where: str) -> np.ndarray:
    out = np.zeros(len(domain))
    for item in text.split():
        try:
            sym, p = item.rsplit(":", 1)
            out[domain.index(sym)] += float(p)
        except ValueError:
            raise OracleError(f"{where}: bad entry {item!r} (expected SYMBOL:prob over {list(domain)})") from None
    if np.any(out < 0):
        raise OracleError(f"{where}: negative probability")
    return out


def parse_grammar(text: str, source: str = "<grammar>") -> Grammar:
    """Read the INI grammar format documented in the README."""
    cp = configparser.ConfigParser(delimiters=("=",))
    cp.optionxform = str
    cp.read_string(text, source=source)
    for sec in ("grammar", "root", "continue", "child", "label"):
        if not cp.has_section(sec):
            raise OracleError(f"{source}: missing [{sec}] section")
    g = cp["grammar"]
    tags = tuple(g["tags"].split())
    labels = tuple(g["labels"].split())
    root_label = g.get("root_label", "root")
    all_labels = tuple(dict.fromkeys(labels + (root_label,)))
    T, R = len(tags), len(all_labels)
    root = np.zeros(T)
    for k, v in cp["root"].items():
        if k not in tags:
            raise OracleError(f"{source}: [root] unknown tag {k!r}")
        root[tags.index(k)] = float(v)
    cont, child = np.zeros((T, 2)), np.zeros((T, 2, T))
    label = np.zeros((T, T, 2, R))
    sides = ("left", "right")
    for k, v in cp["continue"].items():
        a, side = _key(k, 2, tags, source, "continue")
        cont[tags.index(a), sides.index(side)] = float(v)
    for k, v in cp["child"].items():
        a, side = _key(k, 2, tags, source, "child")
        child[tags.index(a), sides.index(side)] = _parse_dist(v, tags, f"{source}: [child] {k}")
    for k, v in cp["label"].items():
        parts = k.split(".")
        if len(parts) not in (2, 3) or parts[0] not in tags or parts[1] not in tags \
                or (len(parts) == 3 and parts[2] not in sides):
            raise OracleError(f"{source}: [label] bad key {k!r} (HEAD.CHILD or HEAD.CHILD.side)")
        dist = _parse_dist(v, all_labels, f"{source}: [label] {k}")
        which = [sides.index(parts[2])] if len(parts) == 3 else [0, 1]
        for s in which:
            label[tags.index(parts[0]), tags.index(parts[1]), s] = dist
    grammar = Grammar(tags, all_labels, root_label, root, cont, child, label,
                      int(g.get("words_per_tag", 20)), float(g.get("ambiguity", 0.0)),
                      int(g.get("max_length", 60)))
    validate_grammar(grammar, source)
    return grammar


def _key(k, size, tags, source, sec):
    parts = k.split(".")
    if len(parts) != size or parts[0] not in tags or parts[1] not in ("left", "right"):
        raise OracleError(f"{source}: [{sec}] bad key {k!r} (expected TAG.left or TAG.right)")
    return parts


def read_grammar(path) -> Grammar:
    return parse_grammar(Path(path).read_text(encoding="utf-8"), str(path))


def validate_grammar(g: Grammar, source: str = "<grammar>"):
    """Reject grammars that cannot generate finite, well-defined trees."""
    if not np.isclose(g.root.sum(), 1.0):
        raise OracleError(f"{source}: root distribution sums to {g.root.sum():g}, expected 1")
    if np.any((g.cont < 0) | (g.cont >= 1)):
        raise OracleError(f"{source}: continuation probabilities must lie in [0, 1)")
    T = len(g.tags)
    reachable = g.root > 0
    M = g.mean_matrix() if np.all(g.cont < 1) else None
    for _ in range(T):
        reachable = reachable | ((reachable.astype(float) @ (M > 0)) > 0)
    for a in range(T):
        for s, side in enumerate(("left", "right")):
            if g.cont[a, s] > 0 and reachable[a]:
                if not np.isclose(g.child[a, s].sum(), 1.0):
                    raise OracleError(f"{source}: [child] {g.tags[a]}.{side} sums to "
                                      f"{g.child[a, s].sum():g}, expected 1")
                for b in np.flatnonzero(g.child[a, s]):
                    if not np.isclose(g.label[a, b, s].sum(), 1.0):
                        raise OracleError(f"{source}: no label distribution for "
                                          f"{g.tags[a]}.{g.tags[b]}.{side}")
    rho = max(abs(np.linalg.eigvals(M)))
    if rho >= 1:
        raise OracleError(f"{source}: branching process is not subcritical (spectral radius {rho:.3f})")
    if g.ambiguity < 0 or g.ambiguity >= 1:
        raise OracleError(f"{source}: ambiguity must lie in [0, 1)")


def _zipf(size: int) -> np.ndarray:
    w = 1.0 / np.arange(1, size + 1)
    return w / w.sum()


class _TooLong(Exception):
    pass


def _sample_tree(g: Grammar, rng: np.random.Generator):
    """One sentence as (tags, heads, labels) index lists; heads are 1-based, 0 = ROOT."""
    budget = [g.max_length - 1]
    root_tag = int(rng.choice(len(g.tags), p=g.root))

    def grow(tag):
        # returns ordered list of (tag, label_or_None, local_parent_or_None); head has parent None
        left, right = [], []
        for s, bucket in ((0, left), (1, right)):
            while rng.random() < g.cont[tag, s]:
                budget[0] -= 1
                if budget[0] < 0:
                    raise _TooLong
                b = int(rng.choice(len(g.tags), p=g.child[tag, s]))
                r = int(rng.choice(len(g.labels), p=g.label[tag, b, s]))
                bucket.append((grow(b), r))
        seq = []
        for sub, r in reversed(left):
            seq.extend(_attach(sub, r, len(seq)))
        head = len(seq)
        seq.append((tag, None, None))
        for sub, r in right:
            seq.extend(_attach(sub, r, len(seq)))
        return [(t, lab, head if p == "HEAD" else p) for t, lab, p in seq]

    nodes = grow(root_tag)
    tags = [t for t, _, _ in nodes]
    heads = [0 if p is None else p + 1 for _, _, p in nodes]
    labels = [g.labels.index(g.root_label) if lab is None else lab for _, lab, _ in nodes]
    return tags, heads, labels


def _attach(sub: list, label: int, offset: int) -> list:
    """Shift a child subtree to absolute offset; its head points at the parent (marked HEAD)."""
    out = []
    for t, lab, p in sub:
        if p is None:
            out.append((t, label, "HEAD"))
        else:
            out.append((t, lab, p + offset))
    return out


def syngen(g: Grammar, size: int, seed: int) -> Treebank:
    """Sample ``size`` labeled sentences; words follow a per-tag Zipf lexicon plus a shared ambiguous pool."""
    rng = np.random.default_rng(seed)
    lex = g.lexicon()
    zipf = _zipf(g.words_per_tag)
    shared = [f"amb{i}" for i in range(g.words_per_tag)]
    sentences = []
    while len(sentences) < size:
        try:
            tags, heads, labels = _sample_tree(g, rng)
        except _TooLong:
            continue
        words = []
        for t in tags:
            pool = shared if rng.random() < g.ambiguity else lex[g.tags[t]]
            words.append(pool[int(rng.choice(len(pool), p=zipf))])
        sid = f"syn-{seed}-{len(sentences) + 1}"
        sentences.append(Sentence(tuple(words), tuple(g.tags[t] for t in tags), tuple(heads),
                                  tuple(g.labels[r] for r in labels), sid, (f"# sent_id = {sid}",)))
    return Treebank(sentences)


def analytic_counts(g: Grammar) -> dict:
    """Expected per-sentence counts of tags and of (head_tag, child_tag, label, dir) arcs, untruncated.

    Head index T in ``hcld`` stands for the root.
    """
    N = g.expected_tag_counts()
    per_side = g.cont / (1.0 - g.cont)
    T, R = len(g.tags), len(g.labels)
    hcld = np.zeros((T + 1, T, R, 3))
    for s, d in ((0, S.RIGHT), (1, S.LEFT)):     # a left child's head lies to its right
        hcld[:T, :, :, d] = np.einsum("a,a,ab,abr->abr", N, per_side[:, s], g.child[:, s], g.label[:, :, s])
    hcld[T, :, g.labels.index(g.root_label), S.ROOTDIR] = g.root
    return {"tags": N, "hcld": hcld, "cld": hcld.sum(axis=0)}


def analytic_statistics(g: Grammar) -> dict:
    """Population values of the POS1, CLD and HCLD statistics as ``{family: {event: value}}``."""
    c = analytic_counts(g)
    total = c["tags"].sum()
    pos = {(t,): float(v / total) for t, v in zip(g.tags, c["tags"])}
    heads = g.tags + (ROOT,)
    cld = {(g.tags[a], g.labels[r], S.DIRS[d]): float(v / total) for (a, r, d), v in np.ndenumerate(c["cld"])}
    hcld = {(heads[h], g.tags[a], g.labels[r], S.DIRS[d]): float(v / total)
            for (h, a, r, d), v in np.ndenumerate(c["hcld"])}
    return {"POS1": pos, "CLD": cld, "HCLD": hcld}


EXAMPLE_GRAMMAR = """\
[grammar]
tags = VERB NOUN ADJ DET ADP
labels = nsubj obj amod det case nmod
root_label = root
words_per_tag = 30
ambiguity = 0.15
max_length = 60

[root]
VERB = 0.9
NOUN = 0.1

[continue]
VERB.left = 0.45
VERB.right = 0.5
NOUN.left = 0.5
NOUN.right = 0.2
ADJ.left = 0.0
ADJ.right = 0.0
DET.left = 0.0
DET.right = 0.0
ADP.left = 0.0
ADP.right = 0.0

[child]
VERB.left = NOUN:1.0
VERB.right = NOUN:1.0
NOUN.left = DET:0.55 ADJ:0.45
NOUN.right = NOUN:0.3 ADP:0.7

[label]
VERB.NOUN.left = nsubj:1.0
VERB.NOUN.right = obj:1.0
NOUN.DET = det:1.0
NOUN.ADJ = amod:1.0
NOUN.NOUN = nmod:1.0
NOUN.ADP = case:1.0
"""
