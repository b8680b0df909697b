"""Query-grouped ranking data: types, readers/writers, splitting, perturbation."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .errors import (
    EmptyDataset,
    InvalidConfig,
    MissingColumn,
    NonPositiveFeature,
    ParseError,
    TooFewQueries,
)
from .scorer import (
    DenseLayer,
    FeaturePartition,
    SirScorer,
    Standardizer,
    WidePath,
    check_query_features,
)

STD_FLOOR = 1e-12


class Item(NamedTuple):
    features: np.ndarray
    label: float


@dataclass(frozen=True)
class Query:
    """One query: ``features`` is (D, J) in raw column order, ``labels`` is (D,)."""

    qid: str
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] == 0 or y.shape != (X.shape[0],):
            raise InvalidConfig(f"query {self.qid}: features {X.shape} vs labels {y.shape}")
        if not np.all(np.isfinite(X)):
            raise InvalidConfig(f"query {self.qid}: non-finite feature value")
        if np.any(y < 0) or not np.all(np.isfinite(y)):
            raise InvalidConfig(f"query {self.qid}: labels must be finite and >= 0")
        object.__setattr__(self, "qid", str(self.qid))
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)

    @property
    def items(self) -> list[Item]:
        return [Item(x, float(l)) for x, l in zip(self.features, self.labels)]

    def __len__(self):
        return self.features.shape[0]


@dataclass(frozen=True)
class Dataset:
    queries: tuple[Query, ...]
    partition: FeaturePartition | None = None

    def __post_init__(self):
        qs = tuple(self.queries)
        if not qs:
            raise EmptyDataset("dataset has no queries")
        object.__setattr__(self, "queries", qs)
        widths = {q.features.shape[1] for q in qs}
        if len(widths) != 1:
            raise InvalidConfig(f"queries disagree on feature count: {sorted(widths)}")
        if self.partition is not None:
            self.partition.check_width(self.feature_count)
            for q in qs:
                check_query_features(self.partition, q.features, q.qid)

    @property
    def feature_count(self) -> int:
        return self.queries[0].features.shape[1]

    def __len__(self):
        return len(self.queries)

    def __iter__(self) -> Iterator[Query]:
        return iter(self.queries)

    def with_partition(self, partition: FeaturePartition) -> Dataset:
        return Dataset(self.queries, partition)

    def stacked(self) -> np.ndarray:
        return np.concatenate([q.features for q in self.queries])

    def fingerprint(self) -> str:
        """SHA-256 over a canonical byte encoding of partition, qids, features and labels."""
        h = hashlib.sha256()
        part = self.partition.to_dict() if self.partition is not None else None
        h.update(json.dumps(part, sort_keys=True).encode())
        for q in self.queries:
            h.update(q.qid.encode("utf-8") + b"\0")
            h.update(np.asarray(q.features.shape, dtype="<i8").tobytes())
            h.update(np.ascontiguousarray(q.features, dtype="<f8").tobytes())
            h.update(np.ascontiguousarray(q.labels, dtype="<f8").tobytes())
        return h.hexdigest()


# -- LETOR ------------------------------------------------------------------


def _parse_letor_lines(lines, source):
    rows = {}  # qid -> list of (label, {fid: value}); dict keeps first-appearance order
    max_fid = 0
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if len(tokens) < 2 or not tokens[1].startswith("qid:"):
            raise ParseError(f"{source}: expected '<label> qid:<id> ...'", lineno)
        try:
            label = float(tokens[0])
        except ValueError:
            raise ParseError(f"{source}: bad label {tokens[0]!r}", lineno) from None
        if not label >= 0 or not math.isfinite(label):
            raise ParseError(f"{source}: label must be a finite value >= 0", lineno)
        qid = tokens[1][4:]
        if not qid:
            raise ParseError(f"{source}: empty qid", lineno)
        feats = {}
        for tok in tokens[2:]:
            fid, sep, val = tok.partition(":")
            try:
                fid_i = int(fid)
                value = float(val)
            except ValueError:
                raise ParseError(f"{source}: bad feature token {tok!r}", lineno) from None
            if not sep or fid_i < 1:
                raise ParseError(f"{source}: feature ids are 1-based, got {tok!r}", lineno)
            if not math.isfinite(value):
                raise ParseError(f"{source}: non-finite value in {tok!r}", lineno)
            feats[fid_i] = value
            max_fid = max(max_fid, fid_i)
        rows.setdefault(qid, []).append((label, feats))
    return rows, max_fid


def load_letor(path, partition: FeaturePartition | None = None) -> Dataset:
    """Read ``<label> qid:<id> <fid>:<val> ... [# comment]`` lines.

    Missing feature ids are filled with 0. The feature count is the largest
    feature id seen, widened to the partition's width when one is given.
    """
    path = Path(path)
    with path.open() as fh:
        rows, max_fid = _parse_letor_lines(fh, path)
    if not rows:
        raise EmptyDataset(f"{path}: no data lines")
    J = max(max_fid, partition.J if partition is not None else 0)
    queries = []
    for qid, items in rows.items():
        X = np.zeros((len(items), J))
        for r, (_, feats) in enumerate(items):
            for fid, v in feats.items():
                X[r, fid - 1] = v
        queries.append(Query(qid, X, [lab for lab, _ in items]))
    return Dataset(queries, partition)


def _fmt_number(v: float) -> str:
    v = float(v)
    if v.is_integer() and abs(v) < 2**53:
        return str(int(v))
    return repr(v)


def save_letor(dataset: Dataset, path) -> None:
    """Write every feature (zeros included) with round-trip float precision."""
    with Path(path).open("w") as fh:
        for q in dataset.queries:
            for x, label in zip(q.features, q.labels):
                feats = " ".join(f"{i}:{_fmt_number(v)}" for i, v in enumerate(x, start=1))
                fh.write(f"{_fmt_number(label)} qid:{q.qid} {feats}\n")


# -- CSV --------------------------------------------------------------------


@dataclass(frozen=True)
class CsvSchema:
    """Column names for a tabular file; the partition is given by column name."""

    qid_column: str
    label_column: str
    feature_columns: tuple[str, ...]
    query_columns: tuple[str, ...] = ()
    stable_columns: tuple[str, ...] = ()
    scaled_columns: tuple[str, ...] = ()

    def partition(self) -> FeaturePartition | None:
        if not (self.query_columns or self.stable_columns or self.scaled_columns):
            return None
        pos = {name: i for i, name in enumerate(self.feature_columns)}
        try:
            return FeaturePartition(
                [pos[c] for c in self.query_columns],
                [pos[c] for c in self.stable_columns],
                [pos[c] for c in self.scaled_columns],
            )
        except KeyError as e:
            raise InvalidConfig(f"partition column {e.args[0]!r} is not a feature column") from None

    @classmethod
    def from_dict(cls, d: dict) -> CsvSchema:
        try:
            return cls(
                d["qid"],
                d["label"],
                tuple(d["features"]),
                tuple(d.get("query", ())),
                tuple(d.get("stable", ())),
                tuple(d.get("scaled", ())),
            )
        except KeyError as e:
            raise InvalidConfig(f"csv schema is missing key {e.args[0]!r}") from None


def load_csv(path, schema: CsvSchema) -> Dataset:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in (schema.qid_column, schema.label_column, *schema.feature_columns):
            if col not in header:
                raise MissingColumn(f"{path}: column {col!r} not in header")
        groups = {}
        for rowno, row in enumerate(reader, start=2):
            vals = []
            for col in (schema.label_column, *schema.feature_columns):
                cell = row[col]
                try:
                    v = float(cell)
                except (TypeError, ValueError):
                    raise ParseError(
                        f"{path}: row {rowno}, column {col!r}: {cell!r} is not a number"
                    ) from None
                if not math.isfinite(v):
                    raise ParseError(f"{path}: row {rowno}, column {col!r}: non-finite value")
                vals.append(v)
            groups.setdefault(row[schema.qid_column], []).append(vals)
    if not groups:
        raise EmptyDataset(f"{path}: no data rows")
    queries = []
    for qid, rows in groups.items():
        arr = np.asarray(rows, dtype=np.float64)
        queries.append(Query(qid, arr[:, 1:], arr[:, 0]))
    return Dataset(queries, schema.partition())


# -- split / perturb --------------------------------------------------------


def split(dataset: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded query-level split; both halves keep the original query order."""
    if not 0 < train_fraction < 1:
        raise InvalidConfig(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(dataset)
    if n < 2:
        raise TooFewQueries(f"need at least 2 queries to split, have {n}")
    n_train = min(max(math.floor(train_fraction * n + 0.5), 1), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    train_idx = np.sort(perm[:n_train])
    test_idx = np.sort(perm[n_train:])
    return (
        Dataset([dataset.queries[i] for i in train_idx], dataset.partition),
        Dataset([dataset.queries[i] for i in test_idx], dataset.partition),
    )


@dataclass(frozen=True)
class PerturbationSpec:
    """Column/factor pairs multiplied into the data at evaluation time."""

    entries: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        entries = tuple((int(c), float(f)) for c, f in self.entries)
        for col, factor in entries:
            if not factor > 0 or not math.isfinite(factor):
                raise InvalidConfig(f"scale factor for column {col} must be > 0, got {factor}")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def parse(cls, text: str) -> PerturbationSpec:
        """``"col:factor[,col:factor...]"``."""
        entries = []
        for part in filter(None, (p.strip() for p in text.split(","))):
            col, sep, factor = part.partition(":")
            try:
                entries.append((int(col), float(factor)))
            except ValueError:
                raise InvalidConfig(f"bad perturbation entry {part!r}; expected col:factor") from None
            if not sep:
                raise InvalidConfig(f"bad perturbation entry {part!r}; expected col:factor")
        return cls(tuple(entries))

    def validate(self, partition: FeaturePartition):
        for col, _ in self.entries:
            if col not in partition.scaled_idx:
                raise InvalidConfig(
                    f"perturbed column {col} is not scale-sensitive {list(partition.scaled_idx)}"
                )

    def to_list(self) -> list:
        return [[c, f] for c, f in self.entries]

    def __bool__(self):
        return bool(self.entries)


def perturb(dataset: Dataset, spec: PerturbationSpec) -> Dataset:
    """Fresh dataset with each listed column multiplied by its factor."""
    if dataset.partition is not None:
        spec.validate(dataset.partition)
    queries = []
    for q in dataset.queries:
        X = q.features.copy()
        for col, factor in spec.entries:
            if not 0 <= col < X.shape[1]:
                raise InvalidConfig(f"perturbed column {col} out of range")
            if not np.all(X[:, col] > 0):
                raise NonPositiveFeature(f"query {q.qid}: column {col} has values <= 0")
            if factor != 1.0:
                X[:, col] = X[:, col] * factor
        queries.append(Query(q.qid, X, q.labels))
    return Dataset(queries, dataset.partition)


# -- standardizer -----------------------------------------------------------


def fit_standardizer(train: Dataset, columns: Sequence[int] | FeaturePartition) -> Standardizer:
    """Population mean/stddev of ``columns`` over every item in ``train``.

    Passing a partition selects its deep-path columns (query + stable).
    Stddevs below 1e-12 are replaced by 1.
    """
    if isinstance(columns, FeaturePartition):
        columns = columns.deep_idx
    if len(train) == 0:
        raise EmptyDataset("cannot fit a standardizer on an empty dataset")
    X = train.stacked()[:, list(columns)]
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std < STD_FLOOR, 1.0, std)
    return Standardizer(mean, std)


# -- synthetic data ---------------------------------------------------------

PRICE_MU = 4.0
PRICE_SIGMA = 0.75
PRICE_SENSITIVITY_BIAS = 1.0


@dataclass(frozen=True)
class SyntheticConfig:
    n_queries: int = 1000
    items_per_query: int = 10
    M: int = 4
    K1: int = 4
    K2: int = 1
    noise: float = 0.5
    seed: int = 0
    price_weight: float = -1.5

    def __post_init__(self):
        if self.n_queries < 1 or self.items_per_query < 1:
            raise InvalidConfig("n_queries and items_per_query must be >= 1")
        if self.M < 1 or self.K1 < 0 or self.K2 < 1:
            raise InvalidConfig("need M >= 1, K1 >= 0, K2 >= 1")
        if not self.noise >= 0:
            raise InvalidConfig("noise must be >= 0")

    @property
    def partition(self) -> FeaturePartition:
        M, K1, K2 = self.M, self.K1, self.K2
        return FeaturePartition(range(M), range(M, M + K1), range(M + K1, M + K1 + K2))

    @property
    def informative_column(self) -> int:
        return self.M + self.K1

    @classmethod
    def from_dict(cls, d: dict) -> SyntheticConfig:
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidConfig(f"unknown synthetic config keys {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise InvalidConfig(str(e)) from None


@dataclass(frozen=True)
class _Planted:
    stable_coef: np.ndarray
    query_coef: np.ndarray
    price_weight: float


def _planted(cfg: SyntheticConfig, rng: np.random.Generator) -> _Planted:
    a = rng.normal(size=cfg.K1) / math.sqrt(max(cfg.K1, 1))
    g = rng.normal(size=cfg.M) * 0.5 / math.sqrt(cfg.M)
    return _Planted(a, g, cfg.price_weight)


def gen_synthetic(cfg: SyntheticConfig) -> Dataset:
    """Seeded synthetic ranking data with one informative scale-sensitive column.

    Query and stable features are standard normal; scale-sensitive features
    are log-normal (price-like). Item utility is
    ``xf . a + price_weight * tanh(xq . g + 1) * log(xs_0) + noise * N(0, 1)``
    and the highest-utility item of each query is labelled 1, the rest 0.
    """
    rng = np.random.default_rng(cfg.seed)
    planted = _planted(cfg, rng)
    N, D = cfg.n_queries, cfg.items_per_query
    xq = rng.normal(size=(N, cfg.M))
    xf = rng.normal(size=(N, D, cfg.K1))
    xs = np.exp(PRICE_MU + PRICE_SIGMA * rng.normal(size=(N, D, cfg.K2)))
    eps = rng.normal(size=(N, D))
    sensitivity = planted.price_weight * np.tanh(xq @ planted.query_coef + PRICE_SENSITIVITY_BIAS)
    utility = xf @ planted.stable_coef + sensitivity[:, None] * np.log(xs[:, :, 0]) + cfg.noise * eps
    queries = []
    for i in range(N):
        X = np.concatenate([np.repeat(xq[i][None, :], D, axis=0), xf[i], xs[i]], axis=1)
        y = np.zeros(D)
        y[np.argmax(utility[i])] = 1.0
        queries.append(Query(str(i + 1), X, y))
    return Dataset(queries, cfg.partition)


def planted_scorer(cfg: SyntheticConfig) -> SirScorer:
    """A scorer whose score equals the noise-free planted utility of ``gen_synthetic``."""
    if cfg.M < 2:
        raise InvalidConfig("the planted scorer needs M >= 2 (wide projection L=1 < M)")
    planted = _planted(cfg, np.random.default_rng(cfg.seed))
    p = cfg.partition
    deep_w = np.concatenate([np.zeros(cfg.M), planted.stable_coef])[None, :]
    w = np.zeros(cfg.K2)
    w[0] = planted.price_weight
    return SirScorer(
        partition=p,
        deep=[DenseLayer(deep_w, np.zeros(1))],
        wide=WidePath(planted.query_coef[None, :].copy(), np.array([PRICE_SENSITIVITY_BIAS]), w),
        standardizer=Standardizer.identity(cfg.M + cfg.K1),
    )
