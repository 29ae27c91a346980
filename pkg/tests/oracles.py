"""Independent reference computations used by the tests."""

import itertools

import numpy as np


def grid_loglik_max(X, z, lo=-5.0, hi=5.0, step=0.1):
    """Maximum unpenalised log-likelihood over a coefficient grid (intercept first)."""
    X = np.asarray(X, float)
    z = np.asarray(z, float)
    axis = np.round(np.arange(lo, hi + step / 2, step), 10)
    p = X.shape[1] + 1
    A = np.column_stack([np.ones(len(z)), X])
    best = -np.inf
    for head in itertools.product(axis, repeat=p - 1):
        # vectorise over the last coefficient
        eta = (A[:, :-1] @ np.array(head))[None, :] + axis[:, None] * A[:, -1][None, :]
        ll = (z * -np.logaddexp(0, -eta) + (1 - z) * -np.logaddexp(0, eta)).sum(axis=1)
        best = max(best, ll.max())
    return float(best)


def loglik(beta, X, z):
    eta = beta[0] + np.asarray(X, float) @ np.asarray(beta[1:], float)
    return float(np.sum(z * -np.logaddexp(0, -eta) + (1 - z) * -np.logaddexp(0, eta)))


def enumerate_matching(f_lp, p_lp, k, caliper=None):
    """Exhaustive optimum for fixed-k matching without replacement.

    Every pool unit goes to one focal unit or to nobody. Assignments are ranked
    by (unmatched penalty, total distance); a focal unit holding m < k clones
    pays sum_{r=m}^{k-1} (k - r). With everyone able to get k clones the
    penalty is zero and this is the plain minimum total distance.
    Returns (penalty, total_distance).
    """
    nf, npool = len(f_lp), len(p_lp)
    best = None
    for assign in itertools.product(range(-1, nf), repeat=npool):
        counts = [0] * nf
        total = 0.0
        ok = True
        for j, f in enumerate(assign):
            if f < 0:
                continue
            d = abs(f_lp[f] - p_lp[j])
            if caliper is not None and d > caliper:
                ok = False
                break
            counts[f] += 1
            total += d
        if not ok or any(c > k for c in counts):
            continue
        penalty = sum(sum(k - r for r in range(m, k)) for m in counts)
        key = (penalty, total)
        if best is None or key[0] < best[0] or (key[0] == best[0] and key[1] < best[1] - 1e-12):
            best = key
    return best


def brute_greedy(f_lp, p_lp, k, caliper=None, replacement=False):
    """Literal greedy: focal in descending lp (ties by index), k nearest by (distance, index)."""
    order = sorted(range(len(f_lp)), key=lambda i: (-f_lp[i], i))
    used = set()
    out = {}
    for i in order:
        cand = [j for j in range(len(p_lp)) if replacement or j not in used]
        cand.sort(key=lambda j: (abs(f_lp[i] - p_lp[j]), j))
        picks = []
        for j in cand[:k]:
            d = abs(f_lp[i] - p_lp[j])
            if caliper is not None and d > caliper:
                break
            picks.append((j, d))
        used.update(j for j, _ in picks)
        out[i] = picks
    return [out[i] for i in range(len(f_lp))]
