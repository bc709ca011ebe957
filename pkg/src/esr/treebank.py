"""CoNLL-U treebanks, sentence validation, subsampling and vocabularies."""

from __future__ import annotations

import collections
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

ROOT, BOS, EOS, UNK_TAG = "<ROOT>", "<BOS>", "<EOS>", "<UNK-TAG>"
RESERVED_TAGS = (ROOT, BOS, EOS, UNK_TAG)
PAD, UNK = "<pad>", "<unk>"
RESERVED_WORDS = (PAD, UNK, BOS, EOS)

ID, FORM, LEMMA, UPOS, XPOS, FEATS, HEAD, DEPREL, DEPS, MISC = range(10)


class TreebankError(ValueError):
    pass


def coarsen(deprel: str) -> str:
    return deprel.split(":", 1)[0]


@dataclass(frozen=True)
class Sentence:
    words: tuple
    tags: tuple | None = None
    heads: tuple | None = None
    labels: tuple | None = None
    sent_id: str | None = None
    comments: tuple = ()
    deprels: tuple | None = field(default=None, compare=False)

    def __post_init__(self):
        n = len(self.words)
        for name in ("tags", "heads", "labels"):
            seq = getattr(self, name)
            if seq is not None and len(seq) != n:
                raise TreebankError(f"sentence {self.sent_id}: {name} has length {len(seq)}, expected {n}")
        if self.heads is not None:
            for i, h in enumerate(self.heads, start=1):
                if not 0 <= h <= n:
                    raise TreebankError(f"sentence {self.sent_id}: head {h} of token {i} out of range")
                if h == i:
                    raise TreebankError(f"sentence {self.sent_id}: token {i} heads itself")

    @property
    def n(self) -> int:
        return len(self.words)

    @property
    def labeled(self) -> bool:
        return self.tags is not None and self.heads is not None and self.labels is not None

    def unlabeled(self) -> "Sentence":
        return Sentence(self.words, sent_id=self.sent_id, comments=self.comments)


def check_tree(heads: Sequence[int], sent_id=None) -> None:
    """Raise unless ``heads`` is a single-root tree over tokens 1..n."""
    roots = [i for i, h in enumerate(heads, start=1) if h == 0]
    if len(roots) != 1:
        raise TreebankError(f"sentence {sent_id}: expected exactly one root, found {len(roots)}")
    n = len(heads)
    for start in range(1, n + 1):
        node, steps = start, 0
        while node != 0:
            node = heads[node - 1]
            steps += 1
            if steps > n:
                raise TreebankError(f"sentence {sent_id}: cycle through token {start}")


@dataclass
class Treebank:
    sentences: list

    def __len__(self):
        return len(self.sentences)

    def __iter__(self) -> Iterator[Sentence]:
        return iter(self.sentences)

    def __getitem__(self, i):
        return self.sentences[i]

    @property
    def labeled_count(self) -> int:
        return sum(s.labeled for s in self.sentences)

    @property
    def unlabeled_count(self) -> int:
        return len(self.sentences) - self.labeled_count

    def unlabeled(self) -> "Treebank":
        return Treebank([s.unlabeled() for s in self.sentences])

    @property
    def n_tokens(self) -> int:
        return sum(s.n for s in self.sentences)


def parse_conllu(lines: Iterable[str], mode: str = "labeled", source: str = "<string>") -> Treebank:
    if mode not in ("labeled", "unlabeled"):
        raise ValueError(f"unknown mode {mode!r}")
    sentences, rows, comments = [], [], []
    start_line = 1

    def flush():
        if not rows:
            comments.clear()
            return
        sent_id = None
        for c in comments:
            body = c[1:].strip()
            if body.startswith("sent_id"):
                sent_id = body.split("=", 1)[-1].strip()
        where = sent_id or f"{source}:{start_line}"
        words = tuple(r[FORM] for _, r in rows)
        if mode == "unlabeled":
            sentences.append(Sentence(words, sent_id=sent_id, comments=tuple(comments)))
        else:
            for lineno, r in rows:
                if r[UPOS] == "_" or r[HEAD] == "_" or r[DEPREL] == "_":
                    raise TreebankError(f"{source}:{lineno}: labeled mode requires UPOS, HEAD and DEPREL")
            try:
                heads = tuple(int(r[HEAD]) for _, r in rows)
            except ValueError:
                lineno = next(ln for ln, r in rows if not r[HEAD].isdigit())
                raise TreebankError(f"{source}:{lineno}: non-integer HEAD") from None
            deprels = tuple(r[DEPREL] for _, r in rows)
            s = Sentence(words, tuple(r[UPOS] for _, r in rows), heads,
                         tuple(coarsen(d) for d in deprels), sent_id, tuple(comments), deprels)
            check_tree(heads, where)
            sentences.append(s)
        rows.clear()
        comments.clear()

    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\r\n")
        if not line.strip():
            flush()
            start_line = lineno + 1
            continue
        if line.startswith("#"):
            if not rows:
                comments.append(line)
            continue
        cols = line.split("\t")
        if len(cols) != 10:
            raise TreebankError(f"{source}:{lineno}: expected 10 tab-separated columns, got {len(cols)}")
        tid = cols[ID]
        if "-" in tid or "." in tid:
            continue
        if not tid.isdigit() or int(tid) != len(rows) + 1:
            raise TreebankError(f"{source}:{lineno}: bad token id {tid!r}")
        rows.append((lineno, cols))
    flush()
    return Treebank(sentences)


def read_conllu(path, mode: str = "labeled") -> Treebank:
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        return parse_conllu(f, mode, source=str(path))


def format_conllu(tb: Treebank) -> str:
    out = []
    for s in tb:
        out.extend(s.comments)
        for i in range(s.n):
            cols = ["_"] * 10
            cols[ID], cols[FORM] = str(i + 1), s.words[i]
            if s.tags is not None:
                cols[UPOS] = s.tags[i]
            if s.heads is not None:
                cols[HEAD] = str(s.heads[i])
            if s.labels is not None:
                cols[DEPREL] = s.deprels[i] if s.deprels is not None else s.labels[i]
            out.append("\t".join(cols))
        out.append("")
    return "\n".join(out) + ("\n" if out else "")


def write_conllu(tb: Treebank, path) -> None:
    Path(path).write_text(format_conllu(tb), encoding="utf-8")


def subsample(tb: Treebank, size: int, seed: int) -> Treebank:
    """Uniform sample of ``size`` sentences without replacement."""
    if size > len(tb):
        raise ValueError(f"cannot subsample {size} sentences from a treebank of {len(tb)}")
    idx = np.random.default_rng(seed).permutation(len(tb))[:size]
    return Treebank([tb[i] for i in idx])


def dev_size(train_size: int) -> int:
    """Held-out size for a realistic split: 50/50 up to 200 sentences, then 100."""
    return min(100, train_size)


def split_train_dev(tb: Treebank, train_size: int, seed: int) -> tuple[Treebank, Treebank]:
    """Disjoint train/dev subsamples with ``|dev| = dev_size(train_size)``."""
    total = train_size + dev_size(train_size)
    pool = subsample(tb, total, seed)
    return Treebank(pool.sentences[:train_size]), Treebank(pool.sentences[train_size:])


@dataclass(frozen=True)
class Vocab:
    """Tag, label and word inventories; indices follow sorted order."""

    tags: tuple
    labels: tuple
    words: tuple = ()

    def __post_init__(self):
        clash = set(self.tags) & set(RESERVED_TAGS)
        if clash:
            raise TreebankError(f"corpus tags collide with reserved symbols: {sorted(clash)}")

    @classmethod
    def build(cls, labeled: Iterable[Sentence], unlabeled: Iterable[Sentence] = (),
              min_freq: int = 2) -> "Vocab":
        tags, labels, counts = set(), set(), collections.Counter()
        for s in labeled:
            tags.update(s.tags)
            labels.update(s.labels)
            counts.update(w.lower() for w in s.words)
        for s in unlabeled:
            counts.update(w.lower() for w in s.words)
        words = sorted(w for w, c in counts.items() if c >= min_freq and w not in RESERVED_WORDS)
        return cls(tuple(sorted(tags)), tuple(sorted(labels)), RESERVED_WORDS + tuple(words))

    @cached_property
    def tag_index(self) -> dict:
        return {t: i for i, t in enumerate(self.tags)}

    @cached_property
    def label_index(self) -> dict:
        return {r: i for i, r in enumerate(self.labels)}

    @cached_property
    def word_index(self) -> dict:
        return {w: i for i, w in enumerate(self.words)}

    @property
    def n_tags(self) -> int:
        return len(self.tags)

    @property
    def n_labels(self) -> int:
        return len(self.labels)

    def word_ids(self, words: Sequence[str]) -> np.ndarray:
        unk = self.word_index[UNK]
        return np.array([self.word_index.get(w.lower(), unk) for w in words], dtype=np.int64)

    def tag_ids(self, tags: Sequence[str]) -> np.ndarray:
        try:
            return np.array([self.tag_index[t] for t in tags], dtype=np.int64)
        except KeyError as e:
            raise TreebankError(f"tag {e.args[0]!r} not in vocabulary") from None

    def label_ids(self, labels: Sequence[str]) -> np.ndarray:
        try:
            return np.array([self.label_index[r] for r in labels], dtype=np.int64)
        except KeyError as e:
            raise TreebankError(f"label {e.args[0]!r} not in vocabulary") from None

    def to_dict(self) -> dict:
        return {"tags": list(self.tags), "labels": list(self.labels), "words": list(self.words)}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        return cls(tuple(d["tags"]), tuple(d["labels"]), tuple(d["words"]))
