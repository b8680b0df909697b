"""Shared test helpers: random scorers and a loop-based reference scorer."""

import math

import numpy as np

from sirank.scorer import DenseLayer, FeaturePartition, SirScorer, Standardizer, WidePath


def random_partition(rng, M, K1, K2):
    cols = rng.permutation(M + K1 + K2)
    return FeaturePartition(cols[:M], cols[M : M + K1], cols[M + K1 :])


def random_scorer(rng, M=3, K1=2, K2=2, L=None, hidden=(4,), baseline=False, partition=None):
    """Scorer with every parameter (biases, standardizer) drawn at random."""
    p = partition or random_partition(rng, M, K1, K2)
    L = L if L is not None else int(rng.integers(1, p.M)) if p.M > 1 else 1
    n_in = p.J if baseline else p.M + p.K1
    sizes = [n_in, *hidden, 1]
    deep = [
        DenseLayer(rng.normal(size=(o, i)) / math.sqrt(i), rng.normal(scale=0.3, size=o))
        for i, o in zip(sizes[:-1], sizes[1:])
    ]
    std = Standardizer(rng.normal(size=n_in), rng.uniform(0.5, 2.0, size=n_in))
    wide = None
    if not baseline:
        wide = WidePath(
            rng.normal(size=(L, p.M)) / math.sqrt(p.M),
            rng.normal(scale=0.3, size=L),
            rng.normal(size=L * p.K2),
        )
    return SirScorer(p, deep, wide, std)


def random_query(rng, partition, D, log_sigma=1.0):
    """(D, J) items sharing one query vector; scaled columns log-normal."""
    X = np.empty((D, partition.J))
    X[:, list(partition.query_idx)] = rng.normal(size=partition.M)
    X[:, list(partition.stable_idx)] = rng.normal(size=(D, partition.K1))
    X[:, list(partition.scaled_idx)] = np.exp(rng.normal(scale=log_sigma, size=(D, partition.K2)))
    return X


def reference_score(scorer, x):
    """Scalar-loop evaluation of deep + wide paths; no numpy linear algebra."""
    x = [float(v) for v in x]
    st = scorer.standardizer
    h = [(x[c] - st.mean[i]) / st.std[i] for i, c in enumerate(scorer.deep_idx)]
    for n, layer in enumerate(scorer.deep):
        out = []
        for o in range(layer.weight.shape[0]):
            z = layer.bias[o] + math.fsum(layer.weight[o, i] * h[i] for i in range(len(h)))
            out.append(max(z, 0.0) if n < len(scorer.deep) - 1 else z)
        h = out
    total = h[0]
    if scorer.wide is not None:
        p = scorer.partition
        xq = [x[c] for c in p.query_idx]
        xs = [x[c] for c in p.scaled_idx]
        wd = scorer.wide
        for l in range(wd.L):
            fs = math.tanh(wd.proj_bias[l] + math.fsum(wd.proj_weight[l, m] * xq[m] for m in range(p.M)))
            for k in range(p.K2):
                total += wd.w[l * p.K2 + k] * fs * math.log(xs[k])
    return total


def central_difference(f, x, h=1e-6):
    x = np.array(x, dtype=np.float64)
    g = np.empty_like(x)
    for i in range(x.size):
        up = x.copy()
        dn = x.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (f(up) - f(dn)) / (2 * h)
    return g
