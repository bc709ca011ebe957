"""Matrix-Tree computations for single-root arborescences.

Arc log-weights are given as ``theta[b, i, j]`` for child token i (0-based
row) and head column j (0 = ROOT, j = token j), batched and padded. Entries
that are masked (self arcs, padding) must be very negative so ``exp`` gives 0.
The root-augmented Laplacian replaces the first row with the root weights,
which restricts the sum to trees with exactly one arc out of ROOT.
"""

from __future__ import annotations

import numpy as np

from . import grad as G
from .model import MASKED, head_mask


class TreeError(ValueError):
    pass


def _valid(theta_shape, lengths) -> np.ndarray:
    B, N, _ = theta_shape
    return head_mask(lengths, N)


def _shift(theta: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """(B, N) max over each child's valid heads; 0 for padding rows.

    Every tree uses exactly one arc per child, so subtracting a per-child
    constant rescales all trees equally and leaves the distribution unchanged.
    """
    c = np.where(valid, theta, -np.inf).max(axis=2)
    return np.where(np.isfinite(c), c, 0.0)


def _weights_np(theta, lengths):
    valid = _valid(theta.shape, lengths)
    c = _shift(theta, valid)
    w = np.where(valid, np.exp(np.where(valid, theta - c[:, :, None], 0.0)), 0.0)
    return w, c, valid


def _laplacian_np(w: np.ndarray, lengths) -> np.ndarray:
    """(B, N, N) root-row Laplacian; rows index heads, columns children."""
    B, N, _ = w.shape
    W = np.swapaxes(w[:, :, 1:], 1, 2)            # W[b, h, m] token h heads token m
    L = -W
    idx = np.arange(N)
    L[:, idx, idx] = W.sum(axis=1)
    L[:, 0, :] = w[:, :, 0]
    pad = np.arange(N)[None, :] >= np.asarray(lengths)[:, None]
    L[:, idx, idx] += pad
    return L


def _marginals_np(theta, lengths):
    w, c, valid = _weights_np(theta, lengths)
    L = _laplacian_np(w, lengths)
    sign, logdet = np.linalg.slogdet(L)
    if np.any(sign <= 0) or not np.all(np.isfinite(logdet)):
        raise TreeError("degenerate arc weights: Laplacian is singular")
    Linv = np.linalg.inv(L)
    B, N, _ = w.shape
    # mu[b, m, h+1] = w(h->m) * (Linv[m, m] [m != 0] - Linv[m, h] [h != 0]); root: w(0->m) Linv[m, 0]
    diag = np.einsum("bmm->bm", Linv)
    not_first = (np.arange(N) != 0).astype(float)
    mu = np.zeros_like(w)
    mu[:, :, 1:] = w[:, :, 1:] * (diag * not_first[None, :])[:, :, None] \
        - w[:, :, 1:] * Linv * not_first[None, None, :]
    mu[:, :, 0] = w[:, :, 0] * Linv[:, :, 0]
    mu = np.where(valid, mu, 0.0)
    return logdet + c.sum(axis=1), mu


def log_partition(theta, lengths) -> G.Node:
    """(B,) log total weight of single-root arborescences; gradient is the edge marginals."""
    theta = G.const(theta)
    logz, mu = _marginals_np(theta.value, lengths)
    return G.custom_grad(logz, [theta], lambda g: [g[:, None, None] * mu], op="log_partition")


def laplacian(theta: G.Node, lengths) -> G.Node:
    """Differentiable root-row Laplacian from shifted log-weights."""
    B, N, N1 = theta.shape
    valid = _valid(theta.shape, lengths)
    c = _shift(theta.value, valid)
    shifted = theta - np.broadcast_to(c[:, :, None], theta.shape)
    w = G.exp(G.where(valid, shifted, 0.0)) * valid.astype(float)
    W = G.transpose(w[:, :, 1:], (0, 2, 1))
    eye = np.eye(N)
    colsum = G.sum(W, axis=1, keepdims=True)
    L = G.broadcast_to(colsum, (B, N, N)) * np.broadcast_to(eye, (B, N, N)) - W
    first = np.zeros((B, N, N))
    first[:, 0, :] = 1.0
    root = G.broadcast_to(G.expand_dims(w[:, :, 0], 1), (B, N, N))
    L = G.where(first.astype(bool), root, L)
    pad = (np.arange(N)[None, :] >= np.asarray(lengths)[:, None]).astype(float)
    return L + pad[:, :, None] * eye[None]


def edge_marginals(theta, lengths) -> G.Node:
    """(B, N, N+1) probability that each arc is in the tree; differentiable to any order."""
    theta = G.const(theta)
    B, N, N1 = theta.shape
    valid = _valid(theta.shape, lengths)
    c = _shift(theta.value, valid)
    shifted = theta - np.broadcast_to(c[:, :, None], theta.shape)
    w = G.exp(G.where(valid, shifted, 0.0)) * valid.astype(float)
    L = laplacian(theta, lengths)
    sign, _ = np.linalg.slogdet(L.value)
    if np.any(sign <= 0):
        raise TreeError("degenerate arc weights: Laplacian is singular")
    Linv = G.inv(L)                       # (B, N, N) [m, h]
    not_first = np.broadcast_to((np.arange(N) != 0).astype(float), (B, N))
    diag = G.einsum("bmh,mh->bm", Linv, np.eye(N)) * not_first
    tok = w[:, :, 1:]
    mu_tok = tok * G.broadcast_to(G.expand_dims(diag, -1), tok.shape) \
        - tok * Linv * np.broadcast_to(not_first[:, None, :], tok.shape)
    mu_root = w[:, :, 0] * Linv[:, :, 0]
    mu = G.concatenate([G.expand_dims(mu_root, -1), mu_tok], axis=2)
    return mu * valid.astype(float)


def tree_entropy(theta, lengths) -> G.Node:
    """(B,) entropy of the arborescence distribution: log Z - sum_e mu(e) theta(e)."""
    theta = G.const(theta)
    valid = _valid(theta.shape, lengths)
    mu = edge_marginals(theta, lengths)
    energy = G.einsum("bij->b", mu * G.where(valid, theta, 0.0))
    return log_partition(theta, lengths) - energy


def tree_mass(log_probs, lengths) -> np.ndarray:
    """(B,) log probability that independent per-child heads form a single-root tree.

    ``log_probs`` must be per-child normalized log head probabilities.
    """
    theta = np.asarray(log_probs.value if isinstance(log_probs, G.Node) else log_probs)
    w = np.where(_valid(theta.shape, lengths), np.exp(theta), 0.0)
    sign, logdet = np.linalg.slogdet(_laplacian_np(w, lengths))
    return np.where(sign > 0, logdet, -np.inf)


def guarded_tree_entropy(log_probs, lengths, min_log_mass: float = -30.0):
    """Tree entropy per sentence, skipping sentences whose tree mass is below ``exp(min_log_mass)``.

    Returns ``(H, kept)``; skipped sentences contribute 0 with no gradient.
    Below that mass the Laplacian is too ill-conditioned for stable marginals.
    """
    log_probs = G.const(log_probs)
    kept = tree_mass(log_probs, lengths) > min_log_mass
    if kept.all():
        return tree_entropy(log_probs, lengths), kept
    B, N, N1 = log_probs.shape
    safe_rows = np.broadcast_to(~kept[:, None, None], log_probs.shape)
    theta = G.where(safe_rows, 0.0, log_probs)
    H = tree_entropy(G.where(_valid(log_probs.shape, lengths), theta, MASKED), lengths)
    return H * kept.astype(float), kept


def prepare(scores, lengths) -> np.ndarray:
    """Mask invalid arcs of a raw (B, N, N+1) score array."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.where(_valid(scores.shape, lengths), scores, MASKED)


def from_weights(weights: np.ndarray) -> np.ndarray:
    """Single-sentence log-weights (1, n, n+1) from a positive weight matrix [child, head]."""
    w = np.asarray(weights, dtype=np.float64)
    n = w.shape[0]
    theta = np.full((1, n, n + 1), MASKED)
    valid = head_mask([n], n)[0]
    if np.any(w[valid] <= 0) or not np.all(np.isfinite(w[valid])):
        raise TreeError("arc weights must be finite and positive")
    theta[0][valid] = np.log(w[valid])
    return theta


def sample_trees(theta: np.ndarray, n: int, samples: int, rng: np.random.Generator) -> np.ndarray:
    """(samples, n) head vectors drawn from the arborescence distribution of one sentence.

    Token heads are drawn left to right, each from its edge marginals given the
    heads already fixed (fixing an arc leaves it as the only candidate for that
    child), which samples trees exactly.
    """
    th = np.repeat(np.asarray(theta, dtype=np.float64)[:1, :n, :n + 1], samples, axis=0)
    lengths = np.full(samples, n)
    out = np.zeros((samples, n), dtype=np.int64)
    rows = np.arange(samples)
    for i in range(n):
        _, mu = _marginals_np(th, lengths)
        cdf = np.cumsum(np.clip(mu[:, i], 0.0, None), axis=1)
        u = rng.random(samples) * cdf[:, -1]
        h = np.minimum((cdf <= u[:, None]).sum(axis=1), n)
        out[:, i] = h
        th[:, i, :] = MASKED
        th[rows, i, h] = 0.0
    return out
