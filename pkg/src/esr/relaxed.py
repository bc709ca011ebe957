"""Sampling estimators of statistics.

``mc_estimate`` draws hard structures and is for evaluation only.
``relaxed_estimate`` replaces every categorical choice with a Gumbel-perturbed
temperature softmax and feeds the relaxed indicators through the (multilinear)
exact expectation code, so gradients flow to the marginals.

Both draw their perturbations from one generator in the same order (tags,
heads, labels) in chunks of ``CHUNK`` samples, so at vanishing temperature the
relaxed estimate reproduces the hard estimate sample for sample.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grad as G
from . import stats as S
from . import treemath
from .model import MarginalSet

CHUNK = 1000


class RelaxedError(ValueError):
    pass


@dataclass
class MCResult:
    """Sample mean and standard deviation of the per-sample batch counts ``g``."""

    mean: np.ndarray
    std: np.ndarray
    samples: int

    @property
    def stderr(self) -> np.ndarray:
        return self.std / np.sqrt(self.samples)


def _chunks(samples: int):
    if samples < 1:
        raise RelaxedError("samples must be >= 1")
    done = 0
    while done < samples:
        size = min(CHUNK, samples - done)
        yield size
        done += size


def _perturbations(rng: np.random.Generator, size: int, m: MarginalSet):
    B, N, T = m.tag.shape
    R = m.n_labels
    return (rng.gumbel(size=(size, B, N, T)), rng.gumbel(size=(size, B, N, N + 1)),
            rng.gumbel(size=(size, B, N, N + 1, R)))


def _hard_samples(m: MarginalSet, gumbels):
    """Argmax of perturbed log-probabilities: (S, B, N) tags, heads, labels at the chosen head."""
    lt, lh, ll = (x.value for x in m.masked_logs())
    gt, gh, gl = gumbels
    tags = np.argmax(lt[None] + gt, axis=-1)
    heads = np.argmax(lh[None] + gh, axis=-1)
    labels_all = np.argmax(ll[None] + gl, axis=-1)                 # (S, B, N, N+1)
    labels = np.take_along_axis(labels_all, heads[..., None], axis=-1)[..., 0]
    return tags, heads, labels


def _sample_tree_heads(m: MarginalSet, size: int, rng: np.random.Generator) -> np.ndarray:
    _, lh, _ = m.masked_logs()
    B, N = m.batch_size, m.max_len
    heads = np.zeros((size, B, N), dtype=np.int64)
    for b in range(B):
        n = int(m.lengths[b])
        heads[:, b, :n] = treemath.sample_trees(lh.value[b:b + 1], n, size, rng)
    return heads


def _sample_entropy(m: MarginalSet, mode: str, tags, heads) -> np.ndarray:
    """Per-sample estimate of an entropy statistic: mean surprisal of the sampled parts."""
    lt, lh, _ = (x.value for x in m.masked_logs())
    Sz, B, N = tags.shape
    mask = m.token_mask.astype(bool)
    if mode == "token":
        lp = np.take_along_axis(np.broadcast_to(lt, (Sz,) + lt.shape), tags[..., None], -1)[..., 0]
        return -(lp * mask).sum(axis=(1, 2)) / mask.sum()
    if mode == "edge":
        lp = np.take_along_axis(np.broadcast_to(lh, (Sz,) + lh.shape), heads[..., None], -1)[..., 0]
        return -(lp * mask).sum(axis=(1, 2)) / mask.sum()
    logz = treemath.log_partition(lh, m.lengths).value                       # (B,)
    lp = np.take_along_axis(np.broadcast_to(lh, (Sz,) + lh.shape), heads[..., None], -1)[..., 0]
    return -((lp * mask).sum(axis=2) - logz[None]).mean(axis=1)


def mc_counts(spec: S.StatisticSpec, m: MarginalSet, samples: int, seed: int,
              mode: str = "independent") -> MCResult:
    """Monte Carlo mean of the batch counts ``g`` (or of the entropy statistic).

    Tree entropy is always estimated from arborescence samples, since it is a
    property of the tree-normalized distribution.
    """
    if mode not in ("independent", "tree"):
        raise RelaxedError(f"unknown mode {mode!r}")
    rng = np.random.default_rng(seed)
    total, total_sq = 0.0, 0.0
    for size in _chunks(samples):
        gumbels = _perturbations(rng, size, m)
        tags, heads, labels = _hard_samples(m, gumbels)
        if mode == "tree" or (spec.is_entropy and spec.mode == "tree"):
            heads = _sample_tree_heads(m, size, rng)
            _, _, ll = (x.value for x in m.masked_logs())
            labels_all = np.argmax(ll[None] + gumbels[2], axis=-1)
            labels = np.take_along_axis(labels_all, heads[..., None], axis=-1)[..., 0]
        if spec.is_entropy:
            per = _sample_entropy(m, spec.mode, tags, heads)[:, None]
        else:
            per = np.zeros((size, spec.dim_g))
            for b in range(m.batch_size):
                n = int(m.lengths[b])
                per += S.count_structures(spec, tags[:, b, :n], heads[:, b, :n], labels[:, b, :n])
        total = total + per.sum(axis=0)
        total_sq = total_sq + (per ** 2).sum(axis=0)
    mean = total / samples
    var = np.clip(total_sq / samples - mean ** 2, 0.0, None) * (samples / max(samples - 1, 1))
    return MCResult(mean, np.sqrt(var), samples)


def mc_estimate(spec: S.StatisticSpec, m: MarginalSet, samples: int, seed: int,
                mode: str = "independent") -> S.StatisticVector:
    """Non-differentiable sample estimate of ``f``."""
    r = mc_counts(spec, m, samples, seed, mode)
    if spec.is_entropy:
        return S.StatisticVector(spec, r.mean, np.zeros(1, bool))
    return S.aggregate(spec, r.mean)


def _relax(logits: G.Node, noise: np.ndarray, tau: float) -> G.Node:
    size = noise.shape[0]
    tiled = G.broadcast_to(G.expand_dims(logits, 0), (size,) + logits.shape)
    z = G.softmax((tiled + noise) * (1.0 / tau), axis=-1)
    return G.reshape(z, (size * logits.shape[0],) + logits.shape[1:])


def relaxed_marginals(m: MarginalSet, gumbels, tau: float) -> MarginalSet:
    """One relaxed one-hot structure per sample, stacked as a batch of ``S * B`` sentences."""
    if not tau > 0:
        raise RelaxedError(f"temperature must be > 0, got {tau}")
    lt, lh, ll = m.masked_logs()
    size = gumbels[0].shape[0]
    lengths = np.tile(m.lengths, size)
    tm = np.tile(m.token_mask, (size, 1))
    hm = np.tile(m.head_mask, (size, 1, 1)).astype(float)
    tag = _relax(lt, gumbels[0], tau)
    head = _relax(lh, gumbels[1], tau)
    label = _relax(ll, gumbels[2], tau)
    tag = tag * np.broadcast_to(tm[..., None], tag.shape)
    head = head * hm
    label = label * np.broadcast_to(hm[..., None], label.shape)
    return MarginalSet(tag, head, label, lengths)


def relaxed_counts(spec: S.StatisticSpec, m: MarginalSet, samples: int, tau: float, seed: int) -> G.Node:
    """Differentiable sample mean of relaxed batch counts (dim_g,)."""
    if spec.is_entropy:
        raise RelaxedError(f"{spec.name}: entropy statistics are always computed exactly")
    if not tau > 0:
        raise RelaxedError(f"temperature must be > 0, got {tau}")
    rng = np.random.default_rng(seed)
    parts = []
    for size in _chunks(samples):
        rm = relaxed_marginals(m, _perturbations(rng, size, m), tau)
        parts.append(S.expect(spec, rm))
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total * (1.0 / samples)


def relaxed_estimate(spec: S.StatisticSpec, m: MarginalSet, samples: int, tau: float,
                     seed: int) -> S.StatisticVector:
    """Differentiable relaxed-sample estimate of ``f``; entropy statistics pass through exactly."""
    if spec.is_entropy:
        if not tau > 0:
            raise RelaxedError(f"temperature must be > 0, got {tau}")
        return S.statistic(spec, m)
    return S.aggregate(spec, relaxed_counts(spec, m, samples, tau, seed))


def anneal(step: int, total: int, start: float = 1.0, end: float = 1.0) -> float:
    """Linear temperature schedule from ``start`` to ``end`` over ``total`` steps."""
    if total <= 0:
        return end
    frac = min(max(step / total, 0.0), 1.0)
    return start + (end - start) * frac
