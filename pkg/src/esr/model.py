"""Joint tagger-parser p(t, e, r | w) = p(e | w) * prod_i p(t_i | w) p(r_i | e_i, w).

Tokens are encoded by a window MLP over word embeddings; tags come from a
linear scorer, heads from a biaffine arc scorer normalised per token, and
labels from a biaffine label scorer for every (child, candidate head) pair.
All distributions are computed for padded batches; padded positions carry
zero probability.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import grad as G
from .treebank import BOS, EOS, PAD, Sentence, TreebankError, Vocab

MASKED = -1e9
WINDOW = 2
CHECKPOINT_MAGIC = "ESR-CHECKPOINT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    hidden_dim: int = 128
    depth: int = 1
    arc_rank: int | None = None     # defaults to hidden_dim
    label_rank: int | None = None   # defaults to hidden_dim

    @property
    def arc_dim(self) -> int:
        return self.arc_rank or self.hidden_dim

    @property
    def label_dim(self) -> int:
        return self.label_rank or self.hidden_dim


@dataclass
class MarginalSet:
    """Per-token tag, head and label-given-head distributions for a padded batch.

    ``tag`` is (B, N, T); ``head`` is (B, N, N+1) with column 0 the ROOT and
    column j token j; ``label`` is (B, N, N+1, R). Rows of padded tokens are zero.
    """

    tag: G.Node
    head: G.Node
    label: G.Node
    lengths: np.ndarray
    log_tag: G.Node | None = None
    log_head: G.Node | None = None
    log_label: G.Node | None = None

    @property
    def batch_size(self) -> int:
        return self.tag.shape[0]

    @property
    def max_len(self) -> int:
        return self.tag.shape[1]

    @property
    def n_tags(self) -> int:
        return self.tag.shape[2]

    @property
    def n_labels(self) -> int:
        return self.label.shape[3]

    @property
    def token_mask(self) -> np.ndarray:
        return token_mask(self.lengths, self.max_len)

    @property
    def head_mask(self) -> np.ndarray:
        return head_mask(self.lengths, self.max_len)

    def sentence(self, b: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        n = int(self.lengths[b])
        return (self.tag.value[b, :n], self.head.value[b, :n, :n + 1],
                self.label.value[b, :n, :n + 1])

    def masked_logs(self) -> tuple[G.Node, G.Node, G.Node]:
        """Log-probabilities with structurally impossible entries set to MASKED."""
        tm = np.broadcast_to(self.token_mask[:, :, None], self.tag.shape).astype(bool)
        hm = self.head_mask
        lm = np.broadcast_to(hm[..., None], self.label.shape)
        lt = self.log_tag if self.log_tag is not None else G.log(self.tag)
        lh = self.log_head if self.log_head is not None else G.log(self.head)
        ll = self.log_label if self.log_label is not None else G.log(self.label)
        return (G.where(tm, lt, MASKED), G.where(hm, lh, MASKED), G.where(lm, ll, MASKED))

    @classmethod
    def from_arrays(cls, sentences: Sequence[tuple]) -> "MarginalSet":
        """Pad per-sentence ``(tag (n,T), head (n,n+1), label (n,n+1,R))`` arrays."""
        lengths = np.array([t.shape[0] for t, _, _ in sentences])
        B, N = len(sentences), int(lengths.max())
        T, R = sentences[0][0].shape[1], sentences[0][2].shape[2]
        tag, head, label = np.zeros((B, N, T)), np.zeros((B, N, N + 1)), np.zeros((B, N, N + 1, R))
        for b, (t, h, lab) in enumerate(sentences):
            n = t.shape[0]
            if h.shape != (n, n + 1) or lab.shape != (n, n + 1, R) or t.shape[1] != T:
                raise ValueError(f"sentence {b}: inconsistent marginal shapes {t.shape}, {h.shape}, {lab.shape}")
            tag[b, :n], head[b, :n, :n + 1], label[b, :n, :n + 1] = t, h, lab
        return cls(G.Node(tag), G.Node(head), G.Node(label), lengths)


def token_mask(lengths, N: int) -> np.ndarray:
    return (np.arange(N)[None, :] < np.asarray(lengths)[:, None]).astype(np.float64)


def head_mask(lengths, N: int) -> np.ndarray:
    """(B, N, N+1) boolean: child i may attach to head column j."""
    lengths = np.asarray(lengths)
    i = np.arange(N)[None, :, None]
    j = np.arange(N + 1)[None, None, :]
    n = lengths[:, None, None]
    return (i < n) & (j <= n) & (j != i + 1)


@dataclass
class Batch:
    words: np.ndarray       # (B, N) word ids, PAD beyond length
    windows: np.ndarray     # (B, N, 2*WINDOW+1) word ids of the context window
    lengths: np.ndarray
    tags: np.ndarray | None = None
    heads: np.ndarray | None = None
    labels: np.ndarray | None = None

    @property
    def mask(self) -> np.ndarray:
        return token_mask(self.lengths, self.words.shape[1])


def make_batch(sentences: Sequence[Sentence], vocab: Vocab, gold: bool = False) -> Batch:
    lengths = np.array([s.n for s in sentences])
    B, N = len(sentences), int(lengths.max())
    pad, bos, eos = (vocab.word_index[w] for w in (PAD, BOS, EOS))
    words = np.full((B, N), pad, dtype=np.int64)
    windows = np.full((B, N, 2 * WINDOW + 1), pad, dtype=np.int64)
    tags = heads = labels = None
    if gold:
        tags, heads, labels = (np.zeros((B, N), dtype=np.int64) for _ in range(3))
    for b, s in enumerate(sentences):
        ids = vocab.word_ids(s.words)
        words[b, :s.n] = ids
        padded = np.concatenate([[bos] * WINDOW, ids, [eos] * WINDOW])
        for o in range(2 * WINDOW + 1):
            windows[b, :s.n, o] = padded[o:o + s.n]
        if gold:
            if not s.labeled:
                raise TreebankError(f"sentence {s.sent_id} is not labeled")
            tags[b, :s.n] = vocab.tag_ids(s.tags)
            heads[b, :s.n] = s.heads
            labels[b, :s.n] = vocab.label_ids(s.labels)
    return Batch(words, windows, lengths, tags, heads, labels)


@dataclass
class ModelParams:
    vocab: Vocab
    config: ModelConfig
    nodes: dict = field(default_factory=dict)

    def __getitem__(self, name) -> G.Node:
        return self.nodes[name]

    def arrays(self) -> dict:
        return {k: v.value.copy() for k, v in self.nodes.items()}

    def load_arrays(self, arrays: dict) -> None:
        for k, v in arrays.items():
            self.nodes[k].value = np.array(v, dtype=np.float64)

    def zero_grad(self) -> None:
        for n in self.nodes.values():
            n.grad = None

    def shapes(self) -> dict:
        return {k: v.shape for k, v in self.nodes.items()}


def init_params(vocab: Vocab, config: ModelConfig = ModelConfig(), seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    V, T, R = len(vocab.words), vocab.n_tags, vocab.n_labels
    E, H, A, L = config.embed_dim, config.hidden_dim, config.arc_dim, config.label_dim

    def glorot(*shape):
        fan_in, fan_out = shape[-2], shape[-1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=shape)

    arrays = {"embed": rng.normal(0.0, 1.0 / np.sqrt(E), size=(V, E))}
    width = (2 * WINDOW + 1) * E
    for k in range(config.depth):
        arrays[f"enc_w{k}"] = glorot(width, H)
        arrays[f"enc_b{k}"] = np.zeros(H)
        width = H
    arrays.update({
        "root": rng.normal(0.0, 0.1, size=H),
        "tag_w": glorot(H, T), "tag_b": np.zeros(T),
        "arc_head": glorot(H, A), "arc_child": glorot(H, A),
        "arc_u": np.zeros((A, A)), "arc_bias": np.zeros(A),
        "lab_head": glorot(H, L), "lab_child": glorot(H, L),
        "lab_u": np.zeros((R, L, L)), "lab_wh": glorot(L, R), "lab_wc": glorot(L, R),
        "lab_b": np.zeros(R),
    })
    return ModelParams(vocab, config, {k: G.param(v) for k, v in sorted(arrays.items())})


def _affine(x: G.Node, w: G.Node, b: G.Node) -> G.Node:
    y = G.einsum("bnk,kh->bnh", x, w)
    return y + G.broadcast_to(b, y.shape)


def encode(params: ModelParams, batch: Batch) -> G.Node:
    """(B, N+1, H) contextual vectors; row 0 of each sentence is the ROOT vector."""
    B, N, K = batch.windows.shape
    cfg = params.config
    x = G.reshape(G.take(params["embed"], batch.windows), (B, N, K * cfg.embed_dim))
    for k in range(cfg.depth):
        x = G.tanh(_affine(x, params[f"enc_w{k}"], params[f"enc_b{k}"]))
    root = G.broadcast_to(params["root"], (B, 1, cfg.hidden_dim))
    return G.concatenate([root, x], axis=1)


def scores(params: ModelParams, batch: Batch) -> tuple[G.Node, G.Node, G.Node]:
    """Raw tag (B,N,T), arc (B,N,N+1) and label (B,N,N+1,R) scores."""
    enc = encode(params, batch)
    B, N1, _ = enc.shape
    N = N1 - 1
    tokens = enc[:, 1:, :]
    tag = _affine(tokens, params["tag_w"], params["tag_b"])

    ah = G.einsum("bjh,ha->bja", enc, params["arc_head"])
    ac = G.einsum("bih,ha->bia", tokens, params["arc_child"])
    arc = G.einsum("bic,bjc->bij", G.einsum("bia,ac->bic", ac, params["arc_u"]), ah)
    head_bias = G.einsum("bja,a->bj", ah, params["arc_bias"])
    arc = arc + G.broadcast_to(G.expand_dims(head_bias, 1), arc.shape)
    arc = G.where(head_mask(batch.lengths, N), arc, MASKED)

    lh = G.einsum("bjh,ha->bja", enc, params["lab_head"])
    lc = G.einsum("bih,ha->bia", tokens, params["lab_child"])
    R = params["lab_b"].shape[0]
    lab = G.einsum("birc,bjc->bijr", G.einsum("bia,rac->birc", lc, params["lab_u"]), lh)
    shape = (B, N, N1, R)
    lab = lab + G.broadcast_to(G.expand_dims(G.einsum("bja,ar->bjr", lh, params["lab_wh"]), 1), shape)
    lab = lab + G.broadcast_to(G.expand_dims(G.einsum("bia,ar->bir", lc, params["lab_wc"]), 2), shape)
    lab = lab + G.broadcast_to(params["lab_b"], shape)
    return tag, arc, lab


def batch_marginals(params: ModelParams, batch: Batch) -> MarginalSet:
    tag_s, arc_s, lab_s = scores(params, batch)
    B, N, _ = tag_s.shape
    tmask = batch.mask
    log_tag = G.log_softmax(tag_s, axis=-1)
    log_head = G.log_softmax(arc_s, axis=-1)
    log_label = G.log_softmax(lab_s, axis=-1)
    tag = G.exp(log_tag) * np.broadcast_to(tmask[:, :, None], tag_s.shape)
    head = G.exp(log_head) * np.broadcast_to(tmask[:, :, None], arc_s.shape)
    label = G.exp(log_label) * np.broadcast_to(tmask[:, :, None, None], lab_s.shape)
    return MarginalSet(tag, head, label, batch.lengths, log_tag, log_head, log_label)


def marginals(params: ModelParams, sentences: Sequence[Sentence] | Sentence) -> MarginalSet:
    if isinstance(sentences, Sentence):
        sentences = [sentences]
    return batch_marginals(params, make_batch(sentences, params.vocab))


def nll(params: ModelParams, sentences: Sequence[Sentence] | Sentence, reduce: str = "mean") -> G.Node:
    """-log p(t, e, r | w) per sentence, averaged (``mean``) or summed over the batch."""
    if isinstance(sentences, Sentence):
        sentences = [sentences]
    batch = make_batch(sentences, params.vocab, gold=True)
    for s in sentences:
        if any(h == i for i, h in enumerate(s.heads, start=1)) or any(h > s.n for h in s.heads):
            raise TreebankError(f"sentence {s.sent_id}: gold head outside support")
    m = batch_marginals(params, batch)
    return _gold_nll(m, batch, reduce)


def _gold_nll(m: MarginalSet, batch: Batch, reduce: str) -> G.Node:
    B, N = batch.words.shape
    bi, ii = np.nonzero(batch.mask)
    t, h, r = batch.tags[bi, ii], batch.heads[bi, ii], batch.labels[bi, ii]
    ll = (m.log_tag[bi, ii, t] + m.log_head[bi, ii, h] + m.log_label[bi, ii, h, r])
    onehot = np.zeros((B, len(bi)))
    onehot[bi, np.arange(len(bi))] = 1.0
    per_sentence = -G.einsum("bk,k->b", onehot, ll)
    if reduce == "none":
        return per_sentence
    total = G.sum(per_sentence)
    return total * (1.0 / B) if reduce == "mean" else total


# ---------------------------------------------------------------- decoding

def _find_cycle(heads: np.ndarray):
    """A cycle in a head vector (index 0 is the root, heads[0] = -1), or None."""
    n = len(heads)
    color = np.zeros(n, dtype=int)
    for start in range(1, n):
        path, node = [], start
        while node > 0 and color[node] == 0:
            color[node] = 1
            path.append(node)
            node = heads[node]
        if node > 0 and color[node] == 1 and node in path:
            return path[path.index(node):]
        for p in path:
            color[p] = 2
    return None


def _chu_liu_edmonds(S: np.ndarray) -> np.ndarray:
    """Maximum arborescence rooted at node 0; ``S[d, h]`` scores head h for dependent d."""
    n = S.shape[0]
    S = S.copy()
    np.fill_diagonal(S, -np.inf)
    S[0, :] = -np.inf
    heads = np.argmax(S, axis=1)
    heads[0] = -1
    cycle = _find_cycle(heads)
    if cycle is None:
        return heads
    in_cycle = np.zeros(n, dtype=bool)
    in_cycle[cycle] = True
    rest = np.flatnonzero(~in_cycle)          # includes the root
    c = len(rest)                             # index of the contracted node
    cyc = np.array(cycle)
    cycle_score = S[cyc, heads[cyc]].sum()

    sub = np.full((c + 1, c + 1), -np.inf)
    sub[:c, :c] = S[np.ix_(rest, rest)]
    # entering the cycle: best dependent inside the cycle for each outside head
    enter = S[np.ix_(cyc, rest)] - S[cyc, heads[cyc]][:, None] + cycle_score
    enter_arg = np.argmax(enter, axis=0)
    sub[c, :c] = enter[enter_arg, np.arange(c)]
    # leaving the cycle: best head inside the cycle for each outside dependent
    leave = S[np.ix_(rest, cyc)]
    leave_arg = np.argmax(leave, axis=1)
    sub[:c, c] = leave[np.arange(c), leave_arg]

    sub_heads = _chu_liu_edmonds(sub)
    out = heads.copy()
    for k, d in enumerate(rest):
        if k == 0:
            continue
        h = sub_heads[k]
        out[d] = cyc[leave_arg[k]] if h == c else rest[h]
    h_c = sub_heads[c]
    entering = cyc[enter_arg[h_c]]
    out[entering] = rest[h_c]
    return out


def max_arborescence(log_scores: np.ndarray) -> np.ndarray:
    """Best single-root tree for ``log_scores`` (n, n+1) [child, head]; returns heads 0..n.

    Root arcs are penalised by more than the score range of any tree, so the
    optimum uses exactly one root arc and is the best such tree.
    """
    n = log_scores.shape[0]
    if n == 1:
        return np.array([0])
    S = np.full((n + 1, n + 1), -np.inf)
    S[1:, :] = log_scores
    valid = np.isfinite(S) & (S > MASKED / 2)
    valid[0, :] = False
    np.fill_diagonal(valid, False)
    S[~valid] = -np.inf
    finite = S[valid]
    penalty = (n + 1) * (finite.max() - finite.min() + 1.0)
    S[1:, 0] -= penalty
    heads = _chu_liu_edmonds(S)
    return heads[1:].astype(np.int64)


def decode(params: ModelParams, sentences: Sequence[Sentence], batch_size: int = 64) -> list[Sentence]:
    """Predicted (tags, heads, labels) for each sentence."""
    out = []
    vocab = params.vocab
    for start in range(0, len(sentences), batch_size):
        chunk = sentences[start:start + batch_size]
        m = marginals(params, chunk)
        for b, s in enumerate(chunk):
            out.append(decode_marginals(m, b, vocab, s))
    return out


def decode_marginals(m: MarginalSet, b: int, vocab: Vocab, s: Sentence) -> Sentence:
    n = int(m.lengths[b])
    tags = np.argmax(m.tag.value[b, :n], axis=-1)
    lh = (m.log_head.value[b, :n, :n + 1] if m.log_head is not None
          else np.log(np.maximum(m.head.value[b, :n, :n + 1], 1e-300)))
    lh = np.where(head_mask([n], n)[0], lh, MASKED)
    heads = max_arborescence(lh)
    labels = np.argmax(m.label.value[b, np.arange(n), heads], axis=-1)
    return Sentence(s.words, tuple(vocab.tags[t] for t in tags), tuple(int(h) for h in heads),
                    tuple(vocab.labels[r] for r in labels), s.sent_id, s.comments)


# ---------------------------------------------------------------- checkpoints

def save_params(params: ModelParams, path) -> None:
    """Header line, JSON metadata line, then raw little-endian float64 arrays in name order."""
    names = sorted(params.nodes)
    meta = {"version": CHECKPOINT_VERSION, "config": asdict(params.config),
            "vocab": params.vocab.to_dict(),
            "arrays": [{"name": k, "shape": list(params.nodes[k].shape)} for k in names]}
    with open(path, "wb") as f:
        f.write(f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n".encode())
        f.write((json.dumps(meta, sort_keys=True) + "\n").encode())
        for k in names:
            f.write(np.ascontiguousarray(params.nodes[k].value, dtype="<f8").tobytes())


def load_params(path) -> ModelParams:
    data = Path(path).read_bytes()
    first, rest = data.split(b"\n", 1)
    magic, version = first.decode().split()
    if magic != CHECKPOINT_MAGIC or int(version) != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version {CHECKPOINT_VERSION} checkpoint")
    header, payload = rest.split(b"\n", 1)
    meta = json.loads(header)
    params = ModelParams(Vocab.from_dict(meta["vocab"]), ModelConfig(**meta["config"]))
    offset = 0
    for a in meta["arrays"]:
        size = int(np.prod(a["shape"])) * 8
        if offset + size > len(payload):
            raise ValueError(f"{path}: missing array data for {a['name']}")
        arr = np.frombuffer(payload[offset:offset + size], dtype="<f8").reshape(a["shape"])
        params.nodes[a["name"]] = G.param(arr.copy())
        offset += size
    if offset != len(payload):
        raise ValueError(f"{path}: trailing or missing array data")
    return params


def params_digest(params: ModelParams) -> str:
    h = hashlib.sha256()
    for k in sorted(params.nodes):
        h.update(k.encode())
        h.update(params.nodes[k].value.tobytes())
    return h.hexdigest()[:16]
