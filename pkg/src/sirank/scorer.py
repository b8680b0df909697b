"""Scale-invariant item scorer.

An item score is the sum of two paths:

* a deep path, an MLP over the standardized query and stable item features;
* a wide path, ``<w, f_s(x_query) (x) log(x_scaled)>``, where ``f_s`` is a
  ``tanh`` projection of the raw query features to ``L < M`` dimensions and
  ``(x)`` is the Kronecker product.

Multiplying any scale-sensitive column by ``c > 0`` adds the same constant
``<w, f_s(x_query) (x) log(c) e_m>`` to every item of a query, so score
differences and rankings inside the query do not move.

A *baseline* scorer has no wide path and feeds every column through the deep
path; it is the comparator for robustness experiments.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics
from .errors import (
    DimensionMismatch,
    InconsistentQueryFeatures,
    InvalidConfig,
    NonPositiveFeature,
    PartitionMismatch,
)

FORMAT_VERSION = 1
QUERY_TOLERANCE = 1e-9

Gradients = dict  # parameter name -> ndarray, same keys/shapes as SirScorer.params()


@dataclass(frozen=True)
class FeaturePartition:
    """Split of the raw feature columns into query / stable / scale-sensitive sets."""

    query_idx: tuple[int, ...]
    stable_idx: tuple[int, ...]
    scaled_idx: tuple[int, ...]

    def __post_init__(self):
        for name in ("query_idx", "stable_idx", "scaled_idx"):
            object.__setattr__(self, name, tuple(int(i) for i in getattr(self, name)))
        if not self.query_idx:
            raise InvalidConfig("partition needs at least one query column")
        if not self.scaled_idx:
            raise InvalidConfig("partition needs at least one scale-sensitive column")
        cols = self.query_idx + self.stable_idx + self.scaled_idx
        if len(set(cols)) != len(cols):
            raise InvalidConfig("partition column sets overlap or repeat a column")
        if min(cols) < 0:
            raise InvalidConfig("partition column indices must be >= 0")
        if sorted(cols) != list(range(len(cols))):
            raise InvalidConfig(
                f"partition must cover columns 0..{len(cols) - 1} exactly, got {sorted(cols)}"
            )

    @property
    def M(self) -> int:
        return len(self.query_idx)

    @property
    def K1(self) -> int:
        return len(self.stable_idx)

    @property
    def K2(self) -> int:
        return len(self.scaled_idx)

    @property
    def J(self) -> int:
        return self.M + self.K1 + self.K2

    @property
    def deep_idx(self) -> tuple[int, ...]:
        return self.query_idx + self.stable_idx

    def check_width(self, J: int):
        if J != self.J:
            raise PartitionMismatch(f"partition covers {self.J} columns, data has {J}")

    def to_dict(self) -> dict:
        return {
            "query": list(self.query_idx),
            "stable": list(self.stable_idx),
            "scaled": list(self.scaled_idx),
        }

    @classmethod
    def from_dict(cls, d: dict) -> FeaturePartition:
        try:
            return cls(d["query"], d.get("stable", ()), d["scaled"])
        except KeyError as e:
            raise InvalidConfig(f"partition is missing key {e.args[0]!r}") from None


@dataclass
class Standardizer:
    """Per-column ``(x - mean) / std`` for the deep-path inputs."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise DimensionMismatch("standardizer mean/std shapes differ")
        if not np.all(self.std > 0):
            raise InvalidConfig("standardizer stddev entries must be > 0")

    @classmethod
    def identity(cls, n: int) -> Standardizer:
        return cls(np.zeros(n), np.ones(n))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)


@dataclass
class WidePath:
    proj_weight: np.ndarray  # (L, M)
    proj_bias: np.ndarray  # (L,)
    w: np.ndarray  # (L*K2,), index l*K2 + k

    @property
    def L(self) -> int:
        return self.proj_weight.shape[0]


@dataclass
class SirScorer:
    partition: FeaturePartition
    deep: list[DenseLayer]
    wide: WidePath | None
    standardizer: Standardizer
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    @property
    def baseline(self) -> bool:
        return self.wide is None

    @property
    def deep_idx(self) -> tuple[int, ...]:
        if self.baseline:
            return tuple(range(self.partition.J))
        return self.partition.deep_idx

    def validate(self):
        p = self.partition
        n_in = len(self.deep_idx)
        if self.standardizer.mean.shape != (n_in,):
            raise DimensionMismatch(
                f"standardizer has {self.standardizer.mean.size} columns, deep path has {n_in}"
            )
        if not self.deep:
            raise DimensionMismatch("deep path needs at least one layer")
        for i, layer in enumerate(self.deep):
            if layer.weight.ndim != 2 or layer.weight.shape[1] != n_in:
                raise DimensionMismatch(
                    f"deep layer {i} expects {layer.weight.shape[-1]} inputs, gets {n_in}"
                )
            if layer.bias.shape != (layer.weight.shape[0],):
                raise DimensionMismatch(f"deep layer {i} bias shape {layer.bias.shape}")
            n_in = layer.weight.shape[0]
        if n_in != 1:
            raise DimensionMismatch("deep path must end in a single output unit")
        if self.wide is not None:
            L = self.wide.L
            if not 1 <= L < p.M:
                raise InvalidConfig(f"wide projection size L={L} must satisfy 1 <= L < M={p.M}")
            if self.wide.proj_weight.shape != (L, p.M) or self.wide.proj_bias.shape != (L,):
                raise DimensionMismatch("wide projection shapes do not match the partition")
            if self.wide.w.shape != (L * p.K2,):
                raise DimensionMismatch(f"wide weights need length {L * p.K2}")

    def params(self) -> dict[str, np.ndarray]:
        """Live views of every learnable array, in a fixed order."""
        out = {}
        for i, layer in enumerate(self.deep):
            out[f"deep.{i}.weight"] = layer.weight
            out[f"deep.{i}.bias"] = layer.bias
        if self.wide is not None:
            out["wide.proj_weight"] = self.wide.proj_weight
            out["wide.proj_bias"] = self.wide.proj_bias
            out["wide.w"] = self.wide.w
        return out

    def n_params(self) -> int:
        return sum(a.size for a in self.params().values())

    def copy(self) -> SirScorer:
        return from_dict(to_dict(self))


def init_scorer(
    partition: FeaturePartition,
    standardizer: Standardizer | None = None,
    hidden_sizes: Sequence[int] = (32, 32),
    L: int = 1,
    baseline: bool = False,
    seed: int = 0,
    w_init: str = "uniform",
) -> SirScorer:
    """Randomly initialised scorer.

    Hidden layers use He-uniform weights, the output layer and ``f_s`` use
    Glorot-uniform, biases start at zero. ``w_init="passthrough"`` sets every
    wide weight to 1, otherwise they are uniform in (-0.1, 0.1).
    """
    rng = np.random.default_rng(seed)
    n_in = partition.J if baseline else partition.M + partition.K1
    if standardizer is None:
        standardizer = Standardizer.identity(n_in)
    sizes = [n_in, *hidden_sizes, 1]
    deep = []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        last = i == len(sizes) - 2
        bound = np.sqrt(6.0 / (fan_in + fan_out)) if last else np.sqrt(6.0 / fan_in)
        deep.append(
            DenseLayer(rng.uniform(-bound, bound, size=(fan_out, fan_in)), np.zeros(fan_out))
        )
    wide = None
    if not baseline:
        M, K2 = partition.M, partition.K2
        bound = np.sqrt(6.0 / (M + L))
        proj = rng.uniform(-bound, bound, size=(L, M))
        if w_init == "passthrough":
            w = np.ones(L * K2)
        elif w_init == "uniform":
            w = rng.uniform(-0.1, 0.1, size=L * K2)
        else:
            raise InvalidConfig(f"unknown w_init {w_init!r}")
        wide = WidePath(proj, np.zeros(L), w)
    return SirScorer(partition, deep, wide, standardizer)


# -- per-item reference path ------------------------------------------------


def f_s(scorer: SirScorer, xq) -> np.ndarray:
    """Query compression ``tanh(P xq + b)`` onto ``L`` dimensions."""
    if scorer.wide is None:
        raise DimensionMismatch("baseline scorer has no wide path")
    xq = numerics.as_vec(xq)
    if xq.size != scorer.partition.M:
        raise DimensionMismatch(f"query vector has {xq.size} entries, expected {scorer.partition.M}")
    return np.tanh(scorer.wide.proj_weight @ xq + scorer.wide.proj_bias)


def f_w(scorer: SirScorer, xq, xs) -> float:
    xs = numerics.as_vec(xs)
    if xs.size != scorer.partition.K2:
        raise DimensionMismatch(f"scaled vector has {xs.size} entries, expected {scorer.partition.K2}")
    logs = numerics.log_elementwise(xs)
    return numerics.dot(scorer.wide.w, numerics.kron(f_s(scorer, xq), logs))


def _mlp(layers: list[DenseLayer], h: np.ndarray) -> np.ndarray:
    for layer in layers[:-1]:
        h = np.maximum(h @ layer.weight.T + layer.bias, 0.0)
    last = layers[-1]
    return (h @ last.weight.T + last.bias)[..., 0]


def f_d(scorer: SirScorer, xq, xf) -> float:
    xq = numerics.as_vec(xq)
    xf = np.asarray(xf, dtype=np.float64).ravel()
    p = scorer.partition
    if scorer.baseline:
        raise DimensionMismatch("baseline scorer's deep path consumes the full item vector")
    if xq.size != p.M or xf.size != p.K1:
        raise DimensionMismatch(f"f_d expects ({p.M}, {p.K1}) inputs, got ({xq.size}, {xf.size})")
    h = scorer.standardizer.apply(np.concatenate([xq, xf]))
    return float(_mlp(scorer.deep, h))


def _check_item(scorer: SirScorer, x) -> np.ndarray:
    x = numerics.as_vec(x)
    if x.size != scorer.partition.J:
        raise DimensionMismatch(f"item has {x.size} features, expected {scorer.partition.J}")
    return x


def score_item(scorer: SirScorer, x) -> float:
    x = _check_item(scorer, x)
    p = scorer.partition
    xs = x[list(p.scaled_idx)]
    if not np.all(xs > 0):
        raise NonPositiveFeature(f"scale-sensitive features must be > 0, got {xs.tolist()}")
    if scorer.baseline:
        return float(_mlp(scorer.deep, scorer.standardizer.apply(x)))
    xq = x[list(p.query_idx)]
    xf = x[list(p.stable_idx)]
    return f_d(scorer, xq, xf) + f_w(scorer, xq, xs)


# -- batched path -----------------------------------------------------------


def _as_matrix(scorer: SirScorer, items) -> np.ndarray:
    X = np.asarray(items, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[0] == 0:
        raise DimensionMismatch(f"expected a non-empty (items, features) array, got {X.shape}")
    if X.shape[1] != scorer.partition.J:
        raise DimensionMismatch(f"items have {X.shape[1]} features, expected {scorer.partition.J}")
    return X


def check_query_features(partition: FeaturePartition, X: np.ndarray, qid=None):
    Q = X[:, list(partition.query_idx)]
    gap = np.abs(Q - Q[0]).max()
    if gap > QUERY_TOLERANCE:
        where = f" in query {qid}" if qid is not None else ""
        raise InconsistentQueryFeatures(
            f"query features differ across items{where} by up to {gap:.3g}"
        )


def _forward(scorer: SirScorer, X: np.ndarray, keep: bool = False):
    p = scorer.partition
    cache = {}
    h = scorer.standardizer.apply(X[:, list(scorer.deep_idx)])
    acts = [h]
    pre = []
    for i, layer in enumerate(scorer.deep):
        z = h @ layer.weight.T + layer.bias
        pre.append(z)
        h = np.maximum(z, 0.0) if i < len(scorer.deep) - 1 else z
        acts.append(h)
    scores = acts[-1][:, 0].copy()
    if keep:
        cache["acts"] = acts
        cache["pre"] = pre
    if scorer.wide is not None:
        xs = X[:, list(p.scaled_idx)]
        if not np.all(xs > 0):
            bad = np.argwhere(~(xs > 0))[0]
            raise NonPositiveFeature(
                f"scale-sensitive column {p.scaled_idx[bad[1]]} of item {bad[0]} is {xs[tuple(bad)]!r}"
            )
        G = np.log(xs)
        Q = X[:, list(p.query_idx)]
        F = np.tanh(Q @ scorer.wide.proj_weight.T + scorer.wide.proj_bias)
        Wm = scorer.wide.w.reshape(scorer.wide.L, p.K2)
        GW = G @ Wm.T
        scores += np.sum(F * GW, axis=1)
        if keep:
            cache.update(G=G, Q=Q, F=F, GW=GW, Wm=Wm)
    else:
        xs = X[:, list(p.scaled_idx)]
        if not np.all(xs > 0):
            raise NonPositiveFeature("scale-sensitive features must be > 0")
    return scores, cache


def score_matrix(scorer: SirScorer, X) -> np.ndarray:
    """Scores for every row of ``X`` without the query-consistency check.

    Rows may belong to different queries; each row is scored on its own.
    """
    X = _as_matrix(scorer, X)
    return _forward(scorer, X)[0]


def score_query(scorer: SirScorer, items, qid=None) -> np.ndarray:
    """Scores for the items of one query, order-aligned with ``items``.

    No softmax is applied; it is monotone within a query and would not change
    the ranking.
    """
    X = _as_matrix(scorer, items)
    check_query_features(scorer.partition, X, qid)
    return _forward(scorer, X)[0]


def backward(scorer: SirScorer, items, upstream) -> Gradients:
    """Gradient of ``sum_j upstream[j] * score_j`` with respect to every parameter.

    Rows of ``items`` are independent, so a batch may mix queries.
    ReLU subgradient at 0 is taken as 0.
    """
    X = _as_matrix(scorer, items)
    u = np.asarray(upstream, dtype=np.float64)
    if u.shape != (X.shape[0],):
        raise DimensionMismatch(f"upstream has shape {u.shape}, expected ({X.shape[0]},)")
    _, cache = _forward(scorer, X, keep=True)
    grads = {}

    dz = u[:, None]
    acts, pre = cache["acts"], cache["pre"]
    layer_grads = []
    for i in range(len(scorer.deep) - 1, -1, -1):
        layer = scorer.deep[i]
        layer_grads.append((i, dz.T @ acts[i], dz.sum(axis=0)))
        if i > 0:
            dz = (dz @ layer.weight) * (pre[i - 1] > 0)
    for i, dW, db in reversed(layer_grads):
        grads[f"deep.{i}.weight"] = dW
        grads[f"deep.{i}.bias"] = db

    if scorer.wide is not None:
        F, G, Q, GW, Wm = cache["F"], cache["G"], cache["Q"], cache["GW"], cache["Wm"]
        dWm = (F * u[:, None]).T @ G
        dA = u[:, None] * GW * (1.0 - F * F)
        grads["wide.proj_weight"] = dA.T @ Q
        grads["wide.proj_bias"] = dA.sum(axis=0)
        grads["wide.w"] = dWm.ravel()
    return grads


# -- persistence ------------------------------------------------------------


def _arr(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "data": [float(v) for v in a.ravel(order="C")]}


def _unarr(d: dict) -> np.ndarray:
    return np.asarray(d["data"], dtype=np.float64).reshape(d["shape"])


def to_dict(scorer: SirScorer) -> dict:
    d = {
        "format_version": FORMAT_VERSION,
        "variant": "baseline" if scorer.baseline else "sir",
        "partition": scorer.partition.to_dict(),
        "layer_sizes": [scorer.deep[0].weight.shape[1]] + [l.weight.shape[0] for l in scorer.deep],
        "standardizer": {"mean": _arr(scorer.standardizer.mean), "std": _arr(scorer.standardizer.std)},
        "deep": [{"weight": _arr(l.weight), "bias": _arr(l.bias)} for l in scorer.deep],
        "wide": None,
        "metadata": scorer.metadata,
    }
    if scorer.wide is not None:
        d["wide"] = {
            "L": scorer.wide.L,
            "proj_weight": _arr(scorer.wide.proj_weight),
            "proj_bias": _arr(scorer.wide.proj_bias),
            "w": _arr(scorer.wide.w),
        }
    return d


def from_dict(d: dict) -> SirScorer:
    version = d.get("format_version")
    if version != FORMAT_VERSION:
        raise InvalidConfig(f"unsupported model format_version {version!r}")
    wide = None
    if d.get("wide") is not None:
        wd = d["wide"]
        wide = WidePath(_unarr(wd["proj_weight"]), _unarr(wd["proj_bias"]), _unarr(wd["w"]))
    return SirScorer(
        partition=FeaturePartition.from_dict(d["partition"]),
        deep=[DenseLayer(_unarr(l["weight"]), _unarr(l["bias"])) for l in d["deep"]],
        wide=wide,
        standardizer=Standardizer(_unarr(d["standardizer"]["mean"]), _unarr(d["standardizer"]["std"])),
        metadata=dict(d.get("metadata") or {}),
    )


def save_scorer(scorer: SirScorer, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(to_dict(scorer), indent=1) + "\n")


def load_scorer(path) -> SirScorer:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise InvalidConfig(f"{path}: not a model file ({e})") from None
    return from_dict(d)
