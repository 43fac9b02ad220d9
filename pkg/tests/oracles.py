"""Independent reference implementations used to cross-check the package.

Nothing here imports the code under test.
"""

from __future__ import annotations

import itertools
import math
from collections import Counter

import numpy as np


def is_subsequence(sub, seq) -> bool:
    it = iter(seq)
    return all(x in it for x in sub)


def lcs_brute(a, b) -> int:
    """Longest common subsequence by enumerating subsequences of the shorter input, longest first."""
    short, other = (a, b) if len(a) <= len(b) else (b, a)
    for size in range(len(short), 0, -1):
        for idx in itertools.combinations(range(len(short)), size):
            if is_subsequence([short[i] for i in idx], other):
                return size
    return 0


def emd_enumerate(xa: np.ndarray, wa: np.ndarray, xb: np.ndarray, wb: np.ndarray) -> float:
    """Minimum Euclidean transport cost over every basic feasible plan.

    A basic plan uses m + n - 1 cells whose columns of the (reduced) constraint
    matrix are independent; the optimum of a bounded LP is attained at one.
    """
    m, n = len(wa), len(wb)
    cost = np.sqrt(((xa[:, None, :] - xb[None, :, :]) ** 2).sum(-1)).ravel()
    a = np.zeros((m + n - 1, m * n))
    for i in range(m):
        for j in range(n):
            a[i, i * n + j] = 1.0
            if j < n - 1:
                a[m + j, i * n + j] = 1.0
    rhs = np.concatenate([wa, wb[:-1]])
    k = m + n - 1
    subsets = np.array(list(itertools.combinations(range(m * n), k)))
    blocks = a[:, subsets].transpose(1, 0, 2)
    ok = np.abs(np.linalg.det(blocks)) > 0.5  # totally unimodular: det in {-1, 0, 1}
    x = np.linalg.solve(blocks[ok], np.broadcast_to(rhs, (int(ok.sum()), k))[..., None])[..., 0]
    feasible = (x >= -1e-12).all(axis=1)
    values = (np.clip(x[feasible], 0, None) * cost[subsets[ok][feasible]]).sum(axis=1)
    return float(values.min())


def central_difference(f, tensor, flat_index: int, h: float) -> float:
    """d f / d tensor.flat[flat_index] by central differences (tensor edited in place and restored)."""
    view = tensor.data.view(-1)
    orig = view[flat_index].item()
    view[flat_index] = orig + h
    f_plus = f()
    view[flat_index] = orig - h
    f_minus = f()
    view[flat_index] = orig
    return (f_plus - f_minus) / (2 * h)


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def tfidf_scores(docs: list[list[str]], query: list[str]) -> list[float]:
    """Cosine between smoothed-idf tf-idf vectors, written with plain dicts."""
    n = len(docs)
    df = Counter(t for d in docs for t in set(d))
    idf = {t: math.log((1 + n) / (1 + c)) + 1 for t, c in df.items()}

    def vec(tokens):
        tf = Counter(t for t in tokens if t in idf)
        v = {t: c * idf[t] for t, c in tf.items()}
        norm = math.sqrt(sum(x * x for x in v.values()))
        return {t: x / norm for t, x in v.items()} if norm else {}

    q = vec(query)
    return [sum(q.get(t, 0.0) * x for t, x in vec(d).items()) for d in docs]


def jaccard(a, b) -> float:
    a, b = set(a), set(b)
    if not a and not b:
        return 0.0
    return len(a & b) / len(a | b)
