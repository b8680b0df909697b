"""Seeded listwise training with Adam, plus a finite-difference gradient audit."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset, fit_standardizer
from .errors import InvalidConfig, NonFiniteLoss, PartitionMismatch, ShapeMismatch
from .losses import LabeledList, listmle_loss, listnet_loss
from .metrics import mean_ndcg
from .scorer import SirScorer, backward, init_scorer, score_matrix

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "listnet"
    epochs: int = 50
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_queries: int = 32
    seed: int = 0
    hidden_sizes: tuple[int, ...] = (32, 32)
    L: int = 1
    baseline_mode: bool = False
    ndcg_k: int | None = 10
    early_stop_patience: int | None = 10
    w_init: str = "uniform"

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.loss not in ("listnet", "listmle"):
            raise InvalidConfig(f"loss must be 'listnet' or 'listmle', got {self.loss!r}")
        if self.epochs < 1:
            raise InvalidConfig("epochs must be >= 1")
        if not self.learning_rate >= 0:
            raise InvalidConfig("learning_rate must be >= 0")
        if self.batch_queries < 1:
            raise InvalidConfig("batch_queries must be >= 1")
        if self.L < 1:
            raise InvalidConfig("L must be >= 1")
        if any(h < 1 for h in self.hidden_sizes):
            raise InvalidConfig("hidden layer sizes must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfig(f"unknown train config keys {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise InvalidConfig(str(e)) from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_sizes"] = list(self.hidden_sizes)
        return d


# -- Adam -------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, t: int, cfg: TrainConfig):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``.

    Inputs are not modified.
    """
    if t < 1:
        raise ValueError("Adam step counter starts at 1")
    if params.keys() != grads.keys():
        raise ShapeMismatch(f"parameter/gradient names differ: {sorted(set(params) ^ set(grads))}")
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1**t
    bc2 = 1.0 - b2**t
    new_params, m_out, v_out = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * (g * g)
        new_params[name] = p - cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        m_out[name] = m
        v_out[name] = v
    return new_params, AdamState(m_out, v_out, t)


# -- training ---------------------------------------------------------------


def query_loss(name: str, scores, labels, tie_seed: int = 0):
    ll = LabeledList(scores, labels)
    if name == "listnet":
        return listnet_loss(ll)
    return listmle_loss(ll, tie_seed)


@dataclass
class TrainReport:
    train_loss: list
    valid_ndcg: list
    best_epoch: int
    model: SirScorer
    seconds: float
    seed: int
    config: TrainConfig
    skipped_queries: int = 0

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "seed": self.seed,
            "variant": "baseline" if self.config.baseline_mode else "sir",
            "config": self.config.to_dict(),
            "epochs_run": len(self.train_loss),
            "best_epoch": self.best_epoch,
            "train_loss": list(self.train_loss),
            "valid_ndcg": list(self.valid_ndcg),
            "skipped_queries": self.skipped_queries,
            "tuning": "equal budget, equal seed; no hyperparameter search",
        }
        if include_timing:
            d["seconds"] = self.seconds
        return d


def _epoch_tie_seeds(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 2, epoch]).integers(0, 2**63 - 1, size=n)


def make_scorer(train: Dataset, cfg: TrainConfig) -> SirScorer:
    p = train.partition
    cols = range(p.J) if cfg.baseline_mode else p
    std = fit_standardizer(train, cols)
    return init_scorer(
        p, std, cfg.hidden_sizes, cfg.L, baseline=cfg.baseline_mode, seed=cfg.seed, w_init=cfg.w_init
    )


def train(train: Dataset, valid: Dataset, cfg: TrainConfig) -> TrainReport:
    """Mini-batch Adam on the mean per-query loss; keeps the best-validation model.

    Every random choice derives from ``cfg.seed``, so the parameter trajectory
    is reproducible bit for bit on one platform.
    """
    if train.partition is None:
        raise PartitionMismatch("training data needs a feature partition")
    if valid.partition != train.partition or valid.feature_count != train.feature_count:
        raise PartitionMismatch("train and validation data must share features and partition")
    if not cfg.baseline_mode and not cfg.L < train.partition.M:
        raise InvalidConfig(f"L={cfg.L} must be < M={train.partition.M}")

    started = time.perf_counter()
    scorer = make_scorer(train, cfg)
    scorer.metadata.update(variant="baseline" if cfg.baseline_mode else "sir", loss=cfg.loss)

    queries = list(train.queries)
    if cfg.loss == "listnet":
        usable = [q for q in queries if np.any(q.labels > 0)]
    else:
        usable = queries
    skipped = len(queries) - len(usable)
    if not usable:
        raise InvalidConfig("no training query has a positive label")
    n = len(usable)

    order_rng = np.random.default_rng([cfg.seed, 1])
    state = AdamState()
    step = 0
    best_ndcg = -math.inf
    best_epoch = 0
    best_model = scorer.copy()
    since_best = 0
    train_loss, valid_ndcg = [], []

    for epoch in range(1, cfg.epochs + 1):
        order = order_rng.permutation(n)
        tie_seeds = _epoch_tie_seeds(cfg.seed, epoch, n)
        epoch_losses = []
        for start in range(0, n, cfg.batch_queries):
            batch = order[start : start + cfg.batch_queries]
            X = np.concatenate([usable[i].features for i in batch])
            scores = score_matrix(scorer, X)
            upstream = np.empty_like(scores)
            pos = 0
            for i in batch:
                q = usable[i]
                d = len(q)
                loss, g = query_loss(cfg.loss, scores[pos : pos + d], q.labels, int(tie_seeds[i]))
                if not math.isfinite(loss):
                    raise NonFiniteLoss(
                        f"non-finite {cfg.loss} loss at epoch {epoch}, step {step + 1}, query {q.qid}"
                    )
                epoch_losses.append(loss)
                upstream[pos : pos + d] = g / len(batch)
                pos += d
            grads = backward(scorer, X, upstream)
            step += 1
            params = scorer.params()
            new_params, state = adam_step(params, grads, state, step, cfg)
            for name, arr in params.items():
                if not np.all(np.isfinite(new_params[name])):
                    raise NonFiniteLoss(f"parameter {name} became non-finite at step {step}")
                arr[...] = new_params[name]

        train_loss.append(math.fsum(epoch_losses) / len(epoch_losses))
        valid_ndcg.append(mean_ndcg(valid, scorer, cfg.ndcg_k))
        log.debug("epoch %d loss %.6f valid ndcg %.4f", epoch, train_loss[-1], valid_ndcg[-1])
        if valid_ndcg[-1] > best_ndcg:
            best_ndcg = valid_ndcg[-1]
            best_epoch = epoch
            best_model = scorer.copy()
            since_best = 0
        else:
            since_best += 1
            if cfg.early_stop_patience is not None and since_best >= cfg.early_stop_patience:
                log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break

    return TrainReport(
        train_loss,
        valid_ndcg,
        best_epoch,
        best_model,
        time.perf_counter() - started,
        cfg.seed,
        cfg,
        skipped,
    )


# -- gradient audit ---------------------------------------------------------

# Relative errors use max(|analytic|, |numeric|, REL_FLOOR) as denominator so
# gradients that are zero up to rounding do not divide by ~0.
REL_FLOOR = 1e-4


@dataclass
class AuditReport:
    block_errors: dict
    n_params: int
    tol: float
    h: float

    @property
    def failures(self) -> list:
        return [name for name, err in self.block_errors.items() if not err < self.tol]

    @property
    def max_error(self) -> float:
        return max(self.block_errors.values()) if self.block_errors else 0.0

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "max_error": self.max_error,
            "tol": self.tol,
            "h": self.h,
            "n_params": self.n_params,
            "block_errors": dict(self.block_errors),
            "failures": self.failures,
        }


def _objective(scorer, loss_name, X, segments, tie_seed):
    scores = score_matrix(scorer, X)
    total = 0.0
    grads = np.empty_like(scores)
    for lo, hi, labels in segments:
        l, g = query_loss(loss_name, scores[lo:hi], labels, tie_seed)
        total += l
        grads[lo:hi] = g
    n = len(segments)
    return total / n, grads / n


def grad_audit(
    scorer: SirScorer,
    loss: str,
    dataset_sample: Dataset,
    h: float = 1e-5,
    tol: float = 1e-5,
    tie_seed: int = 0,
    corrupt: dict | None = None,
) -> AuditReport:
    """Compare analytic gradients of the mean query loss with central differences.

    ``corrupt`` maps parameter names to factors applied to the analytic
    gradient before comparison; it exists to check that the audit catches
    broken backward passes.
    """
    X = np.concatenate([q.features for q in dataset_sample.queries])
    segments = []
    pos = 0
    for q in dataset_sample.queries:
        segments.append((pos, pos + len(q), q.labels))
        pos += len(q)
    work = scorer.copy()
    _, upstream = _objective(work, loss, X, segments, tie_seed)
    analytic = backward(work, X, upstream)
    for name, factor in (corrupt or {}).items():
        analytic[name] = analytic[name] * factor

    errors = {}
    for name, arr in work.params().items():
        numeric = np.empty_like(arr)
        flat = arr.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up, _ = _objective(work, loss, X, segments, tie_seed)
            flat[i] = orig - h
            down, _ = _objective(work, loss, X, segments, tie_seed)
            flat[i] = orig
            num_flat[i] = (up - down) / (2.0 * h)
        a = analytic[name]
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), REL_FLOOR)
        errors[name] = float(np.max(np.abs(a - numeric) / denom))
    return AuditReport(errors, work.n_params(), tol, h)
