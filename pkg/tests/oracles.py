"""Independent reference implementations used as test oracles.

These are deliberately naive (explicit loops over indices) and share no code
with the package beyond plain numpy arrays.
"""
import itertools

import numpy as np


def naive_matmul(a, b):
    """Triple loop, accumulating left to right from 0.0."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def full_tt_tensor(cores, terminal):
    """Materialize the (2 x ... x 2 x k) tensor by summing over every rank path.

    ``cores[l]`` has shape (2, r_{l-1}, r_l) with r_0 = 1; ``terminal`` is r_n x k.
    Returns a dict mapping the tuple of slice bits to a k-vector.
    """
    n = len(cores)
    ranks = [1] + [c.shape[2] for c in cores]
    out = {}
    for bits in itertools.product((0, 1), repeat=n):
        acc = np.zeros(terminal.shape[1])
        for path in itertools.product(*[range(r) for r in ranks[1:]]):
            prod = 1.0
            prev = 0
            for l in range(n):
                prod *= cores[l][bits[l], prev, path[l]]
                prev = path[l]
            acc += prod * terminal[prev]
        out[bits] = acc
    return out


def rank_ap(scores, labels):
    """O(N^2) average precision: rank of i counts samples scored higher, or
    scored equal with a smaller index."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    N = scores.size
    rank = np.empty(N, dtype=int)
    for i in range(N):
        r = 1
        for j in range(N):
            if scores[j] > scores[i] or (scores[j] == scores[i] and j < i):
                r += 1
        rank[i] = r
    pos = np.flatnonzero(labels)
    if pos.size == 0:
        return float("nan")
    total = 0.0
    for i in pos:
        hits = sum(1 for j in pos if rank[j] <= rank[i])
        total += hits / rank[i]
    return total / pos.size


def ln(x, g, b, eps=1e-5):
    mu = sum(x) / len(x)
    var = sum((xi - mu) ** 2 for xi in x) / len(x)
    return [(xi - mu) / np.sqrt(var + eps) * gi + bi for xi, gi, bi in zip(x, g, b)]


def gelu_scalar(u):
    return 0.5 * u * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (u + 0.044715 * u ** 3)))
