"""Slow, independent reference implementations used only by the tests.

Nothing here imports from the package under test.
"""

import mpmath

mpmath.mp.dps = 60


def energy_distance_loops(V, S, unbiased=False):
    """Double-loop energy distance.

    Within-sample averages run over all ordered pairs, or over i != i' when
    ``unbiased``.
    """
    nv, ns = len(V), len(S)
    cross = 0.0
    for v in V:
        for s in S:
            cross += abs(v - s)
    within_v = 0.0
    for i in range(nv):
        for k in range(nv):
            if i != k or not unbiased:
                within_v += abs(V[i] - V[k])
    within_s = 0.0
    for j in range(ns):
        for k in range(ns):
            if j != k or not unbiased:
                within_s += abs(S[j] - S[k])
    dv = nv * (nv - 1) if unbiased else nv * nv
    ds = ns * (ns - 1) if unbiased else ns * ns
    return 2.0 * cross / (nv * ns) - within_v / dv - within_s / ds


def average_ranks(x):
    """1-based ranks, ties get the mean of the positions they span (O(n^2))."""
    ranks = []
    for xi in x:
        less = sum(1 for xj in x if xj < xi)
        equal = sum(1 for xj in x if xj == xi)
        ranks.append(less + (equal + 1) / 2.0)
    return ranks


def pearson_mp(a, b):
    a = [mpmath.mpf(float(v)) for v in a]
    b = [mpmath.mpf(float(v)) for v in b]
    n = len(a)
    ma, mb = mpmath.fsum(a) / n, mpmath.fsum(b) / n
    num = mpmath.fsum((x - ma) * (y - mb) for x, y in zip(a, b))
    da = mpmath.sqrt(mpmath.fsum((x - ma) ** 2 for x in a))
    db = mpmath.sqrt(mpmath.fsum((y - mb) ** 2 for y in b))
    return float(num / (da * db))


def spearman_bruteforce(a, b):
    return pearson_mp(average_ranks(a), average_ranks(b))


def rmse_loops(y, p):
    return float(mpmath.sqrt(mpmath.fsum((mpmath.mpf(float(u)) - float(v)) ** 2
                                         for u, v in zip(y, p)) / len(y)))


def rmae_loops(y, p):
    return float(mpmath.sqrt(mpmath.fsum(abs(mpmath.mpf(float(u)) - float(v))
                                         for u, v in zip(y, p)) / len(y)))


def softmax_mp(v):
    v = [mpmath.mpf(float(x)) for x in v]
    e = [mpmath.exp(x) for x in v]
    z = mpmath.fsum(e)
    return [x / z for x in e]


def entropy_mp(v):
    p = softmax_mp(v)
    return float(-mpmath.fsum(q * mpmath.log(q) for q in p if q > 0))


def central_difference(f, x, h=1e-5):
    """Gradient of scalar f at a list of floats by central differences."""
    grad = []
    for i in range(len(x)):
        xp = list(x)
        xm = list(x)
        xp[i] += h
        xm[i] -= h
        grad.append((f(xp) - f(xm)) / (2 * h))
    return grad
