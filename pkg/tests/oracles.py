"""Independent reference computations used by the test-suite.

Everything here is written straight from the defining formulas with plain
loops and no shared code with ``linvid``.
"""

import itertools
import math

import numpy as np


def naive_wkv(k, v, w, u, alpha0=None, beta0=None):
    """Literal per-step transcription of the unshifted recurrence."""
    T, d = k.shape
    dt = k.dtype
    w = np.asarray(w, dtype=dt)
    u = np.asarray(u, dtype=dt)
    alpha = np.zeros(d, dt) if alpha0 is None else np.array(alpha0, dtype=dt)
    beta = np.zeros(d, dt) if beta0 is None else np.array(beta0, dtype=dt)
    out = np.empty((T, d), dt)
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(T):
            e = np.exp(u + k[i])
            out[i] = (e * v[i] + alpha) / (e + beta)
            alpha = np.exp(-w) * alpha + np.exp(k[i]) * v[i]
            beta = np.exp(-w) * beta + np.exp(k[i])
    return out, alpha, beta


def matrix_fold(r, k, v, w, u, n_heads):
    """Per-step outer-product fold of the matrix-state recurrence, with loops."""
    T, d = r.shape
    N = d // n_heads
    S = np.zeros((n_heads, N, N))
    out = np.zeros((T, d))
    for t in range(T):
        for h in range(n_heads):
            sl = slice(h * N, (h + 1) * N)
            rh, kh, vh = r[t, sl], k[t, sl], v[t, sl]
            for j in range(N):
                acc = 0.0
                for i in range(N):
                    acc += rh[i] * (math.exp(u[sl][i]) * kh[i] * vh[j] + S[h, i, j])
                out[t, h * N + j] = acc
            for i in range(N):
                for j in range(N):
                    S[h, i, j] = math.exp(-w[sl][i]) * S[h, i, j] + kh[i] * vh[j]
    return out, S


def cosine(a, b):
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    if na == 0 or nb == 0:
        return 0.0
    return sum(x * y for x, y in zip(a, b)) / (na * nb)


def brute_force_stome(embs, sizes, origins, r, order):
    """Exhaustive merge-layer reference for tiny frames.

    Returns a list of ``(embedding, size, origin)`` in output order.
    ``embs`` is a list of lists (patch tokens only).
    """
    n = len(embs)
    A = list(range(0, n, 2))
    B = list(range(1, n, 2))
    # best partner of each A token: scan every B, keep the first maximum
    best = {}
    for ai in A:
        best_score, best_j = None, None
        for bj in B:
            s = cosine(embs[ai], embs[bj])
            if best_score is None or s > best_score:
                best_score, best_j = s, bj
        best[ai] = (best_score, best_j)
    # enumerate every r-subset of A; keep the one with the largest score sum,
    # ties -> the subset whose origins sorted ascending are lexicographically smallest
    chosen = ()
    if r > 0:
        cands = []
        for combo in itertools.combinations(A, r):
            total = sum(best[a][0] for a in combo)
            cands.append((-total, sorted(origins[a] for a in combo), combo))
        # sum comparison needs a tolerance: equal-score edges can sum differently in float
        top = min(c[0] for c in cands)
        finalists = [c for c in cands if c[0] <= top + 1e-12]
        chosen = min(finalists, key=lambda c: c[1])[2]
    groups = {j: [j] for j in range(n) if j not in chosen}
    for a in chosen:
        groups[best[a][1]].append(a)
    toks = []
    for j in sorted(groups):
        mem = groups[j]
        size = sum(sizes[m] for m in mem)
        emb = [sum(sizes[m] * embs[m][c] for m in mem) / size for c in range(len(embs[0]))]
        toks.append((emb, size, min(origins[m] for m in mem)))
    if order == "ascending":
        toks.sort(key=lambda t: (t[1], t[2]))
    elif order == "descending":
        toks.sort(key=lambda t: (-t[1], t[2]))
    return toks


def central_difference(f, x, idx, h=1e-5):
    old = x[idx]
    x[idx] = old + h
    fp = f()
    x[idx] = old - h
    fm = f()
    x[idx] = old
    return (fp - fm) / (2 * h)


def rel_err(a, b):
    """Max absolute error scaled by the reference's largest magnitude."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = max(np.max(np.abs(b)), np.finfo(float).tiny)
    return float(np.max(np.abs(a - b)) / scale)


def grad_rel_err(analytic, numeric, floor=1e-8):
    """Elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
