"""Independent reference implementations used by the tests.

Written with explicit Python loops and no shared code with the package, so
agreement is evidence rather than tautology.
"""
import math

import numpy as np


def naive_learnable_pool(f, queries, w_q, w_k, w_v, heads):
    """Multi-head attention pooling, one scalar at a time."""
    n, c = f.shape
    nq, d = queries.shape
    dk = d // heads

    def proj(x, w):
        rows, inner = x.shape
        out = np.zeros((rows, w.shape[1]))
        for i in range(rows):
            for j in range(w.shape[1]):
                s = 0.0
                for t in range(inner):
                    s += x[i, t] * w[t, j]
                out[i, j] = s
        return out

    q, k, v = proj(queries, w_q), proj(f, w_k), proj(f, w_v)
    out = np.zeros((nq, d))
    for h in range(heads):
        lo = h * dk
        for i in range(nq):
            scores = []
            for j in range(n):
                s = 0.0
                for t in range(dk):
                    s += q[i, lo + t] * k[j, lo + t]
                scores.append(s / math.sqrt(dk))
            m = max(scores)
            e = [math.exp(s - m) for s in scores]
            z = sum(e)
            for t in range(dk):
                acc = 0.0
                for j in range(n):
                    acc += e[j] / z * v[j, lo + t]
                out[i, lo + t] = acc
    return out


def smoothed_ce(logits, targets, eps):
    total = 0.0
    for row, t in zip(logits, targets):
        m = max(row)
        lse = m + math.log(sum(math.exp(z - m) for z in row))
        c = len(row)
        for j, z in enumerate(row):
            q = eps / c + (1 - eps if j == t else 0.0)
            total -= q * (z - lse)
    return total / len(targets)


def cosine(t, t_max, lr_max, lr_min):
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * t / t_max))
