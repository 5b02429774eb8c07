"""Pure-Python coordinate descent, numerically identical in intent to ``_cd.pyx``.

Used when the compiled extension is missing or ``DYNDML_PURE_PYTHON=1``.
"""
import numpy as np


def _sweep(G, resid, beta, thresh, idx):
    max_change = 0.0
    diag = G.diagonal()
    for j in idx:
        gjj = diag[j]
        if gjj <= 0.0:
            continue
        old = beta[j]
        z = resid[j] + gjj * old
        t = thresh[j]
        if z > t:
            new = (z - t) / gjj
        elif z < -t:
            new = (z + t) / gjj
        else:
            new = 0.0
        if new != old:
            delta = new - old
            beta[j] = new
            resid -= G[j] * delta
            if abs(delta) > max_change:
                max_change = abs(delta)
    return max_change


def _solve(G, c, lam, weights, beta, tol, max_iter):
    thresh = lam * weights
    resid = c - G @ beta
    all_idx = range(G.shape[0])
    n_iter = 0
    change = 0.0
    while n_iter < max_iter:
        change = _sweep(G, resid, beta, thresh, all_idx)
        n_iter += 1
        if change < tol:
            return n_iter, change, True
        active = np.flatnonzero(beta)
        while n_iter < max_iter:
            change = _sweep(G, resid, beta, thresh, active)
            n_iter += 1
            if change < tol:
                break
    return n_iter, change, False


def cd_gram(G, c, lam, weights, beta, tol=1e-7, max_iter=10000):
    G = np.ascontiguousarray(G, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    return _solve(G, c, float(lam), w, beta, tol, max_iter)


def cd_path(G, c, lambdas, weights, beta0=None, tol=1e-7, max_iter=10000):
    G = np.ascontiguousarray(G, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    q = G.shape[0]
    beta = np.zeros(q) if beta0 is None else np.array(beta0, dtype=np.float64)
    out = np.zeros((len(lambdas), q))
    iters = np.zeros(len(lambdas), dtype=np.intc)
    conv = np.zeros(len(lambdas), dtype=bool)
    for i, lam in enumerate(lambdas):
        iters[i], _, conv[i] = _solve(G, c, float(lam), w, beta, tol, max_iter)
        out[i] = beta
    return out, iters, conv
