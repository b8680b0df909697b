"""Acceptance gate: one pass/fail line per criterion, collected in the terminal summary."""

import itertools
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

import conftest
from helpers import random_partition, random_query, random_scorer

from sirank.cli import main
from sirank.data import Dataset, PerturbationSpec, Query, load_letor, perturb, split
from sirank.losses import LabeledList, listmle_loss, listnet_loss
from sirank.metrics import mean_ndcg, ndcg, rank
from sirank.scorer import FeaturePartition, score_query
from sirank.training import TrainConfig, grad_audit, train


def record(n, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {title} ({detail})"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def _random_dims(rng):
    M = int(rng.integers(2, 9))
    K1 = int(rng.integers(0, 6))
    K2 = int(rng.integers(1, 5))
    L = int(rng.integers(1, M))
    return M, K1, K2, L


def _shift_trials(rng, n, per_column):
    worst = 0.0
    for _ in range(n):
        M, K1, K2, L = _random_dims(rng)
        hidden = tuple(int(h) for h in rng.integers(1, 9, size=rng.integers(0, 3)))
        sc = random_scorer(rng, M, K1, K2, L=L, hidden=hidden)
        p = sc.partition
        X = random_query(rng, p, int(rng.integers(2, 11)), log_sigma=2.0)
        i, j = rng.choice(len(X), size=2, replace=False)
        c = np.exp(rng.uniform(math.log(1e-3), math.log(1e3), size=K2 if per_column else 1))
        Xc = X.copy()
        Xc[:, list(p.scaled_idx)] *= c
        s, sc_ = score_query(sc, X), score_query(sc, Xc)
        delta, delta_c = s[i] - s[j], sc_[i] - sc_[j]
        worst = max(worst, abs(delta_c - delta) / max(1.0, abs(delta)))
    return worst


def test_criterion_1_uniform_scale_keeps_pairwise_differences():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst = _shift_trials(rng, 1000, per_column=False)
    secs = time.perf_counter() - t0
    record(1, "uniform c keeps score differences", worst <= 1e-8 and secs < 10,
           f"worst scaled error {worst:.2e} <= 1e-8, {secs:.2f}s < 10s")


def test_criterion_2_per_column_scale_keeps_pairwise_differences():
    rng = np.random.default_rng(202)
    worst = _shift_trials(rng, 1000, per_column=True)
    record(2, "independent c per scaled column", worst <= 1e-8, f"worst scaled error {worst:.2e} <= 1e-8")


def test_criterion_3_ranking_unchanged():
    rng = np.random.default_rng(303)
    factors = (0.01, 0.5, 10.0, 1000.0)
    checked = mismatches = 0
    while checked < 200:
        M, K1, K2, L = _random_dims(rng)
        sc = random_scorer(rng, M, K1, K2, L=L, hidden=(6,))
        X = random_query(rng, sc.partition, 20, log_sigma=1.5)
        s = score_query(sc, X)
        if np.min(np.diff(np.sort(s))) <= 1e-6:
            continue
        checked += 1
        base = rank(s).order
        for c in factors:
            Xc = X.copy()
            Xc[:, list(sc.partition.scaled_idx)] *= c
            if not np.array_equal(rank(score_query(sc, Xc)).order, base):
                mismatches += 1
    record(3, "rankings identical under c in {0.01, 0.5, 10, 1000}", mismatches == 0,
           f"{mismatches} mismatches over {checked} queries x {len(factors)} factors")


def test_criterion_4_losses_ignore_constant_shift():
    rng = np.random.default_rng(404)
    worst = 0.0
    for _ in range(500):
        d = int(rng.integers(1, 21))
        labels = rng.integers(0, 5, size=d).astype(float)
        labels[rng.integers(d)] = max(1.0, labels.max())
        s = rng.normal(scale=3.0, size=d)
        k = rng.uniform(-100, 100)
        seed = int(rng.integers(1 << 30))
        for loss in (listnet_loss, lambda l: listmle_loss(l, seed)):
            a, _ = loss(LabeledList(s, labels))
            b, _ = loss(LabeledList(s + k, labels))
            worst = max(worst, abs(a - b))
    record(4, "ListNet and ListMLE unchanged by score shift", worst <= 1e-9, f"worst |diff| {worst:.2e} <= 1e-9")


def test_criterion_5_gradient_audit():
    rng = np.random.default_rng(505)
    t0 = time.perf_counter()
    worst, sizes, failures = 0.0, [], []
    for trial in range(20):
        while True:
            M, K1, K2 = int(rng.integers(2, 5)), int(rng.integers(0, 4)), int(rng.integers(1, 4))
            hidden = tuple(int(h) for h in rng.integers(2, 7, size=rng.integers(1, 3)))
            sc = random_scorer(rng, M, K1, K2, L=int(rng.integers(1, M)), hidden=hidden)
            if sc.n_params() <= 200:
                break
        sizes.append(sc.n_params())
        queries = []
        for qi in range(3):
            d = int(rng.integers(2, 7))
            labels = rng.integers(0, 4, size=d).astype(float)
            labels[0] = max(labels[0], 1.0)
            queries.append(Query(str(qi), random_query(rng, sc.partition, d), labels))
        sample = Dataset(queries, sc.partition)
        for loss in ("listnet", "listmle"):
            rep = grad_audit(sc, loss, sample, h=1e-5, tol=1e-5, tie_seed=trial)
            worst = max(worst, rep.max_error)
            failures += [f"{trial}/{loss}/{b}" for b in rep.failures]
    secs = time.perf_counter() - t0
    record(5, "analytic gradients match central differences", not failures and secs < 30,
           f"worst rel error {worst:.2e} < 1e-5 over {len(sizes)} models "
           f"({min(sizes)}-{max(sizes)} params), {secs:.1f}s < 30s")


def _oracle_ndcg(labels, order, k):
    gains = [2.0**y - 1.0 for y in labels]
    depth = len(labels) if k is None else min(k, len(labels))

    def dcg(seq):
        return math.fsum(gains[i] / math.log2(r + 2) for r, i in enumerate(seq[:depth]))

    ideal = max(dcg(p) for p in itertools.permutations(range(len(labels))))
    return 1.0 if ideal == 0 else dcg(list(order)) / ideal


def test_criterion_6_ndcg_matches_brute_force():
    rng = np.random.default_rng(606)
    worst = 0.0
    for _ in range(1000):
        d = int(rng.integers(1, 9))
        labels = rng.integers(0, 5, size=d).astype(float)
        perm = rank(rng.normal(size=d))
        k = None if rng.random() < 0.5 else int(rng.integers(1, 10))
        worst = max(worst, abs(ndcg(labels, perm, k) - _oracle_ndcg(labels, perm.order, k)))
    hand = ndcg([0.0, 1.0], rank([1.0, 0.0]))
    ok = worst <= 1e-12 and abs(hand - 0.630930) <= 1e-6
    record(6, "NDCG equals exhaustive-permutation oracle", ok,
           f"worst |diff| {worst:.1e} <= 1e-12; labels [0,1] worst-ranked -> {hand:.6f}")


EXPERIMENT_CONFIG = {
    "seed": 7,
    "data": {"synthetic": {"n_queries": 2600, "items_per_query": 10}},
    "split": {"train_fraction": 10 / 13},
}


@pytest.fixture(scope="module")
def experiment_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("experiment")
    cfg = base / "config.json"
    cfg.write_text(json.dumps(EXPERIMENT_CONFIG))
    runs = []
    for name in ("first", "second"):
        out = base / name
        t0 = time.perf_counter()
        code = main(["experiment", "--config", str(cfg), "--out", str(out)])
        runs.append((code, out, time.perf_counter() - t0))
    return runs


def test_criterion_7_synthetic_experiment(experiment_runs):
    code, out, secs = experiment_runs[0]
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert report["metadata"]["n_test_queries"] == 600
    assert report["metadata"]["perturbation"] == [[8, 100.0]]
    rows = {r["model"]: r for r in report["rows"]}
    checks, notes = [], []
    for loss in ("ListNet", "ListMLE"):
        base, sir = rows[loss], rows[f"{loss} (SIR)"]
        sir_gap = abs(sir["unperturbed"] - sir["perturbed"])
        drop = base["unperturbed"] - base["perturbed"]
        margin = sir["unperturbed"] - (base["unperturbed"] - 0.02)
        checks += [sir_gap <= 0.005, drop >= 0.02, margin >= 0]
        notes.append(f"{loss}: SIR gap {sir_gap:.4f}, baseline drop {drop:.3f}, do-no-harm margin {margin:+.3f}")
    record(7, "synthetic perturbation experiment", all(checks) and secs < 120,
           "; ".join(notes) + f"; {secs:.1f}s < 120s")


def test_criterion_8_experiment_is_deterministic(experiment_runs):
    (_, a, _), (_, b, _) = experiment_runs
    same = all((a / f).read_bytes() == (b / f).read_bytes() for f in ("report.json", "report.txt"))
    models = sorted(p.relative_to(a) for p in (a / "models").iterdir())
    same_models = all((a / m).read_bytes() == (b / m).read_bytes() for m in models)
    record(8, "repeated experiment gives byte-identical output", same and same_models,
           f"report.json, report.txt and {len(models)} model files compared")


# MSLR-WEB30K feature 126 counts slashes in the URL.
MSLR_SLASH_FEATURE = 126


def _first_queries(path: Path, n: int, dest: Path) -> Path:
    seen = []
    with path.open() as src, dest.open("w") as out:
        for line in src:
            qid = line.split(None, 2)[1]
            if qid not in seen:
                if len(seen) == n:
                    break
                seen.append(qid)
            out.write(line)
    return dest


def mslr_dataset(fold_dir: Path, tmp: Path, n_queries: int = 1000) -> Dataset:
    """First ``n_queries`` of MSLR fold 1 with two query-level columns appended.

    MSLR has no query features, so a constant and log(1 + list length) are
    added to give the compression map something to read. Zero slash counts
    become 0.5 so the log path is defined.
    """
    raw = load_letor(_first_queries(fold_dir / "train.txt", n_queries, tmp / "mslr_sub.txt"))
    J = raw.feature_count
    slash = MSLR_SLASH_FEATURE - 1
    queries = []
    for q in raw.queries:
        X = np.hstack([q.features, np.ones((len(q), 1)), np.full((len(q), 1), math.log1p(len(q)))])
        X[:, slash] = np.where(X[:, slash] > 0, X[:, slash], 0.5)
        queries.append(Query(q.qid, X, q.labels))
    stable = [c for c in range(J) if c != slash]
    return Dataset(queries, FeaturePartition([J, J + 1], stable, [slash]))


@pytest.mark.skipif(not os.environ.get("SIRANK_MSLR_FOLD1"), reason="set SIRANK_MSLR_FOLD1 to an MSLR Fold1 directory")
def test_criterion_9_mslr_direction(tmp_path):
    ds = mslr_dataset(Path(os.environ["SIRANK_MSLR_FOLD1"]), tmp_path)
    fit_valid, test = split(ds, 0.7, 7)
    fit, valid = split(fit_valid, 0.9, 7)
    spec = PerturbationSpec(((MSLR_SLASH_FEATURE - 1, 100.0),))
    perturbed = perturb(test, spec)
    result = {}
    for baseline in (True, False):
        rep = train(fit, valid, TrainConfig(loss="listnet", baseline_mode=baseline, seed=7, epochs=20))
        result[baseline] = mean_ndcg(perturbed, rep.model, 10)
    record(9, "MSLR subsample: SIR beats baseline under slash x100", result[False] > result[True],
           f"perturbed NDCG@10 SIR {result[False]:.3f} vs baseline {result[True]:.3f}")
