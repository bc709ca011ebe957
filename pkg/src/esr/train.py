"""Semi-supervised training: O = L + alpha * C with mixing, scheduling and early stopping."""

from __future__ import annotations

import configparser
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import grad as G
from . import stats as S
from .evaluation import score
from .loss import LossConfig, batch_loss
from .model import ModelConfig, ModelParams, batch_marginals, decode, make_batch, _gold_nll
from .targets import TargetsBundle
from .treebank import Sentence


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    alpha: float = 0.01
    lr: float = 1e-3
    batch_size: int = 8
    epochs: int = 40
    steps_per_epoch: int = 200
    mix_labeled: int = 1
    mix_unlabeled: int = 4
    warmup: int = 500
    schedule: str = "slanted"          # slanted | constant
    optimizer: str = "adamw"           # adamw | sgd
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    clip: float = 5.0
    seed: int = 0
    distance: str = "smooth_l1"
    variant: str = "continuous"
    aggregation: str = "per_batch"
    entropy_token: float = 1.0
    entropy_edge: float = 1.0
    entropy_tree: float = 1.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.mix_labeled < 1 or self.mix_unlabeled < 1:
            raise ValueError("mixing ratio terms must be positive integers")
        if self.schedule not in ("slanted", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.optimizer not in ("adamw", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1 or self.epochs < 1 or self.steps_per_epoch < 1:
            raise ValueError("batch size, epochs and steps per epoch must be >= 1")
        self.loss_config()

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def loss_config(self) -> LossConfig:
        return LossConfig(self.distance, self.variant, self.aggregation,
                          {"token": self.entropy_token, "edge": self.entropy_edge,
                           "tree": self.entropy_tree})

    def digest(self) -> str:
        return config_hash(asdict(self))


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:12]


def _coerce(cls, values: dict) -> dict:
    types = {f.name: f.type for f in fields(cls)}
    out = {}
    for k, v in values.items():
        if k not in types:
            raise ValueError(f"unknown {cls.__name__} option {k!r}")
        t = types[k] if isinstance(types[k], str) else types[k].__name__
        if not isinstance(v, str):
            out[k] = v
        elif t == "int | None":
            out[k] = None if v.lower() == "none" else int(v)
        elif t == "int":
            out[k] = int(v)
        elif t == "float":
            out[k] = float(v)
        else:
            out[k] = v
    return out


def read_config(text: str, overrides: dict | None = None) -> tuple[TrainConfig, ModelConfig, dict]:
    """Parse ``[train]``, ``[model]`` and ``[data]`` sections; ``overrides`` wins over the file.

    Override keys are ``section.option`` or bare TrainConfig field names.
    """
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp.read_string(text)
    sections = {s: dict(cp[s]) if cp.has_section(s) else {} for s in ("train", "model", "data")}
    unknown = set(cp.sections()) - set(sections)
    if unknown:
        raise ValueError(f"unknown config sections {sorted(unknown)}")
    for key, value in (overrides or {}).items():
        sec, _, opt = key.rpartition(".")
        sections[sec or "train"][opt] = value
    return (TrainConfig(**_coerce(TrainConfig, sections["train"])),
            ModelConfig(**_coerce(ModelConfig, sections["model"])), sections["data"])


def schedule(step: int, total: int, warmup: int) -> float:
    """Slanted triangular multiplier: 0 -> 1 over ``warmup`` steps, then 1 -> 0 at ``total``."""
    if warmup > total:
        raise ValueError(f"warmup ({warmup}) exceeds total steps ({total})")
    if not 0 <= step <= total:
        raise ValueError(f"step {step} outside [0, {total}]")
    if step < warmup:
        return step / warmup
    if total == warmup:
        return 1.0
    return (total - step) / (total - warmup)


class Optimizer:
    """AdamW with decoupled weight decay, or plain gradient descent."""

    def __init__(self, params: ModelParams, cfg: TrainConfig):
        self.params, self.cfg = params, cfg
        self.m = {k: np.zeros(v.shape) for k, v in params.nodes.items()}
        self.v = {k: np.zeros(v.shape) for k, v in params.nodes.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        cfg = self.cfg
        self.t += 1
        for k, node in self.params.nodes.items():
            g = node.grad if node.grad is not None else np.zeros(node.shape)
            if cfg.optimizer == "sgd":
                node.value = node.value - lr * g
                continue
            self.m[k] = cfg.beta1 * self.m[k] + (1 - cfg.beta1) * g
            self.v[k] = cfg.beta2 * self.v[k] + (1 - cfg.beta2) * g * g
            mhat = self.m[k] / (1 - cfg.beta1 ** self.t)
            vhat = self.v[k] / (1 - cfg.beta2 ** self.t)
            node.value = node.value - lr * (mhat / (np.sqrt(vhat) + cfg.adam_eps)
                                            + cfg.weight_decay * node.value)


def clip_gradients(params: ModelParams, max_norm: float) -> float:
    """Scale gradients to global norm ``max_norm``; returns the norm before clipping."""
    grads = [n.grad for n in params.nodes.values() if n.grad is not None]
    norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
    if max_norm > 0 and norm > max_norm:
        for n in params.nodes.values():
            if n.grad is not None:
                n.grad = n.grad * (max_norm / norm)
    return norm


def format_record(record: dict) -> str:
    """One ``key=value`` log line; floats at 17 significant digits."""
    parts = []
    for k, v in record.items():
        if isinstance(v, (float, np.floating)):
            v = format(float(v), ".17g")
        parts.append(f"{k}={v}")
    return " ".join(parts)


def parse_record(line: str) -> dict:
    out = {}
    for tok in line.split():
        k, _, v = tok.partition("=")
        try:
            out[k] = int(v)
        except ValueError:
            try:
                out[k] = float(v)
            except ValueError:
                out[k] = v
    return out


@dataclass
class TrainResult:
    params: ModelParams
    log: list = field(default_factory=list)      # record dicts, in order
    best_epoch: int = 0
    best: dict = field(default_factory=dict)

    def lines(self) -> list[str]:
        return [format_record(r) for r in self.log]


def _finite_or_raise(step: int, parts: dict):
    # individual statistic components first, so the message names the culprit
    ordered = sorted(parts.items(), key=lambda kv: not kv[0].startswith("C_"))
    for name, v in ordered:
        if not np.isfinite(v):
            raise TrainingError(f"step {step}: non-finite value in {name} ({v})")


def objective(params: ModelParams, labeled: Sequence[Sentence], unlabeled_groups: Sequence[Sequence[Sentence]],
              bundle: TargetsBundle | None, specs: dict, cfg: TrainConfig):
    """Build O = L + alpha*C for one step; returns (O node, parts dict of floats).

    C is computed whenever a bundle and unlabeled groups are given, so an
    alpha = 0 run still logs it without it affecting the update.
    """
    parts, total = {}, None
    if labeled:
        batch = make_batch(labeled, params.vocab, gold=True)
        L = _gold_nll(batch_marginals(params, batch), batch, "mean")
        parts["L"] = float(L.value)
        total = L
    if bundle is not None and unlabeled_groups:
        flat = [s for grp in unlabeled_groups for s in grp]
        groups = np.concatenate([np.full(len(g), i) for i, g in enumerate(unlabeled_groups)])
        m = batch_marginals(params, make_batch(flat, params.vocab))
        res = batch_loss(bundle, specs, m, cfg.loss_config(), groups)
        parts["C"] = float(res.total.value)
        for name, node in res.components.items():
            parts[f"C_{name}"] = float(node.value)
        term = res.total * cfg.alpha
        total = term if total is None else total + term
    if total is None:
        raise TrainingError("nothing to optimize: no labeled data and no unsupervised term")
    parts["O"] = float(total.value)
    return total, parts


def evaluate_dev(params: ModelParams, dev: Sequence[Sentence]) -> dict:
    pred = decode(params, list(dev))
    return score(list(dev), pred)


def train(params: ModelParams, labeled: Sequence[Sentence], unlabeled: Sequence[Sentence],
          bundle: TargetsBundle | None, cfg: TrainConfig, dev: Sequence[Sentence] = (),
          on_record: Callable[[dict], None] | None = None) -> TrainResult:
    """Run the training loop; keeps the epoch checkpoint with the best dev (POS + LAS) / 2."""
    labeled, unlabeled, dev = list(labeled), list(unlabeled), list(dev)
    if cfg.alpha > 0 and not unlabeled:
        raise TrainingError("alpha > 0 requires unlabeled data")
    if cfg.alpha > 0 and bundle is None:
        raise TrainingError("alpha > 0 requires a targets bundle")
    if not labeled and not (cfg.alpha > 0):
        raise TrainingError("no labeled data and alpha = 0: nothing to train")
    specs = bundle.specs(params.vocab) if bundle is not None else {}
    for s in dev:
        if not s.labeled:
            raise TrainingError(f"dev sentence {s.sent_id} is not labeled")
    # separate streams: labeled draws do not depend on whether C is computed
    rng = np.random.default_rng(cfg.seed)
    rng_unl = np.random.default_rng([cfg.seed, 1])
    opt = Optimizer(params, cfg)
    total = cfg.total_steps
    if cfg.schedule == "slanted":
        schedule(0, total, cfg.warmup)      # validates warmup
    result = TrainResult(params)

    def emit(rec):
        result.log.append(rec)
        if on_record:
            on_record(rec)

    emit({"event": "start", "config": cfg.digest(), "seed": cfg.seed,
          "labeled": len(labeled), "unlabeled": len(unlabeled), "dev": len(dev)})
    best_score, best_arrays = -np.inf, params.arrays()
    step = 0
    k = cfg.batch_size
    for epoch in range(1, cfg.epochs + 1):
        for _ in range(cfg.steps_per_epoch):
            lab = [labeled[i] for i in rng.integers(0, len(labeled), size=k * cfg.mix_labeled)] \
                if labeled else []
            groups = []
            if bundle is not None and unlabeled:
                idx = rng_unl.integers(0, len(unlabeled), size=(cfg.mix_unlabeled, k))
                groups = [[unlabeled[i] for i in row] for row in idx]
            params.zero_grad()
            O, parts = objective(params, lab, groups, bundle, specs, cfg)
            _finite_or_raise(step + 1, parts)
            G.backward(O)
            gnorm = clip_gradients(params, cfg.clip)
            mult = schedule(step, total, cfg.warmup) if cfg.schedule == "slanted" else 1.0
            lr = cfg.lr * mult
            opt.step(lr)
            step += 1
            emit({"event": "step", "step": step, "epoch": epoch, **parts, "lr": lr, "gnorm": gnorm})
        if dev:
            metrics = evaluate_dev(params, dev)
            rec = {"event": "epoch", "epoch": epoch, "step": step,
                   **{f"dev_{k2}": v for k2, v in metrics.items()}}
            if metrics["avg"] > best_score:
                best_score, best_arrays = metrics["avg"], params.arrays()
                result.best_epoch, result.best = epoch, metrics
            emit(rec)
        else:
            best_arrays, result.best_epoch = params.arrays(), epoch
    params.load_arrays(best_arrays)
    emit({"event": "final", "best_epoch": result.best_epoch,
          **{f"dev_{k2}": v for k2, v in result.best.items()}})
    return result
