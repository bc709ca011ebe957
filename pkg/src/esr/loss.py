"""Distances between statistics and targets, and the unsupervised loss term C."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import grad as G
from . import stats as S
from .model import MarginalSet
from .targets import TargetsBundle, TargetsError

VARIANTS = ("continuous", "as_written")
DISTANCES = ("smooth_l1", "l1", "l2", "hard_l1")
AGGREGATIONS = ("per_batch", "per_sentence")


class LossError(ValueError):
    pass


def _check_sigma(sigma):
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma < 0):
        raise LossError("margins must be >= 0")
    return sigma


def smooth_l1(t, sigma, f, variant: str = "continuous") -> G.Node:
    """Elementwise smoothed hinge: quadratic within the margin, linear outside.

    Outside the margin the ``continuous`` variant subtracts sigma/2 (matching
    the quadratic branch at the boundary); ``as_written`` subtracts sigma.
    A zero margin gives plain |f - t|.
    """
    if variant not in VARIANTS:
        raise LossError(f"unknown smooth-L1 variant {variant!r}")
    sigma = _check_sigma(sigma)
    f = G.const(f)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), f.shape)
    sigma = np.broadcast_to(sigma, f.shape)
    d = f - t
    a = G.abs(d)
    zero = sigma == 0
    safe = np.where(zero, 1.0, sigma)
    inside = a.value < sigma
    # the quadratic branch only sees |d| < sigma, so tiny margins cannot overflow it
    quad = G.div(G.square(G.where(inside, d, 0.0)), 2.0 * safe)
    lin = a - (0.5 * sigma if variant == "continuous" else sigma)
    return G.where(zero, a, G.where(inside, quad, lin))


def alt_distance(t, sigma, f, kind: str) -> G.Node:
    """Elementwise ``l1``, ``l2`` (margins ignored) or ``hard_l1`` = max(0, |d| - sigma)."""
    f = G.const(f)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), f.shape)
    d = f - t
    if kind == "l1":
        return G.abs(d)
    if kind == "l2":
        return G.square(d)
    if kind == "hard_l1":
        sigma = np.broadcast_to(_check_sigma(sigma), f.shape)
        return G.relu(G.abs(d) - sigma)
    raise LossError(f"unknown distance {kind!r}")


def distance(t, sigma, f, kind: str = "smooth_l1", variant: str = "continuous") -> G.Node:
    if kind == "smooth_l1":
        return smooth_l1(t, sigma, f, variant)
    return alt_distance(t, sigma, f, kind)


@dataclass
class LossConfig:
    distance: str = "smooth_l1"
    variant: str = "continuous"
    aggregation: str = "per_batch"
    entropy_weights: dict = field(default_factory=lambda: {"token": 1.0, "edge": 1.0, "tree": 1.0})

    def __post_init__(self):
        if self.distance not in DISTANCES:
            raise LossError(f"unknown distance {self.distance!r}; choose from {DISTANCES}")
        if self.variant not in VARIANTS:
            raise LossError(f"unknown smooth-L1 variant {self.variant!r}")
        if self.aggregation not in AGGREGATIONS:
            raise LossError(f"unknown aggregation {self.aggregation!r}; choose from {AGGREGATIONS}")
        bad = set(self.entropy_weights) - set(S.ENTROPY_MODES)
        if bad:
            raise LossError(f"unknown entropy modes {sorted(bad)}")


@dataclass
class LossResult:
    total: G.Node
    components: dict        # family or entropy name -> scalar Node


def _group_matrix(groups, B: int) -> np.ndarray:
    groups = np.zeros(B, dtype=np.int64) if groups is None else np.asarray(groups)
    if groups.shape != (B,):
        raise LossError(f"groups must assign each of the {B} sentences to a minibatch")
    ids = np.unique(groups)
    return (groups[None, :] == ids[:, None]).astype(np.float64)


def family_loss(spec: S.StatisticSpec, t: np.ndarray, sigma: np.ndarray, m: MarginalSet,
                cfg: LossConfig, groups=None) -> G.Node:
    """Loss of one family, averaged over minibatches (``groups``) of the marginal batch."""
    onehot = _group_matrix(groups, m.batch_size)
    per = S.expect(spec, m, per_sentence=True)                               # (B, d_g)
    # per_batch: one statistic per minibatch; per_sentence: one per sentence, summed
    gbar = G.einsum("gb,bd->gd", onehot, per) if cfg.aggregation == "per_batch" else per
    f = S.aggregate(spec, gbar).values
    shape = f.shape
    ell = distance(np.broadcast_to(t, shape), np.broadcast_to(sigma, shape), f, cfg.distance, cfg.variant)
    return G.sum(ell) * (1.0 / onehot.shape[0])


def batch_loss(bundle: TargetsBundle, specs: dict, m: MarginalSet, cfg: LossConfig = LossConfig(),
               groups=None, entropy: bool = True) -> LossResult:
    """The unsupervised term C for one marginal batch.

    ``specs`` maps family ids to StatisticSpecs and must cover every family in
    the bundle. Entropy statistics are added as weighted penalties.
    """
    if m.batch_size < 1:
        raise LossError("batch must be nonempty")
    missing = [f for f in bundle.families if f not in specs]
    if missing:
        raise LossError(f"bundle references families absent from the statistic set: {missing}")
    comps = {}
    for name in bundle.families:
        spec = specs[name]
        if spec.is_entropy:
            raise TargetsError(f"{name}: entropy statistics take weights, not targets")
        t, sigma = bundle.dense(spec)
        comps[name] = family_loss(spec, t, sigma, m, cfg, groups)
    if entropy:
        for mode, w in cfg.entropy_weights.items():
            if w:
                comps[S.ENTROPY_NAMES[mode]] = S.entropy_stats(m, mode) * float(w)
    total = None
    for c in comps.values():
        total = c if total is None else total + c
    if total is None:
        total = G.Node(0.0)
    return LossResult(total, comps)
