# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled coordinate descent for the lasso in covariance (Gram) form.

Solves ``min_b 0.5 b'Gb - c'b + lam * sum_j w_j |b_j|``, which equals the
lasso objective ``(1/2N)||y - Xb||^2 + lam ||b||_1`` with ``G = X'X/N`` and
``c = X'y/N`` up to a constant.
"""
import numpy as np

from libc.math cimport fabs


cdef inline double _soft(double z, double t) noexcept nogil:
    if z > t:
        return z - t
    if z < -t:
        return z + t
    return 0.0


cdef double _sweep(const double[:, ::1] G, double[::1] resid, double[::1] beta,
                   const double[::1] thresh, const int[::1] idx, Py_ssize_t n_idx) noexcept nogil:
    cdef Py_ssize_t ii, j, k, q = G.shape[0]
    cdef double old, new, z, delta, gjj
    cdef double max_change = 0.0
    for ii in range(n_idx):
        j = idx[ii]
        gjj = G[j, j]
        if gjj <= 0.0:
            continue
        old = beta[j]
        z = resid[j] + gjj * old
        new = _soft(z, thresh[j]) / gjj
        if new != old:
            delta = new - old
            beta[j] = new
            for k in range(q):
                resid[k] -= G[j, k] * delta
            if fabs(delta) > max_change:
                max_change = fabs(delta)
    return max_change


cdef int _solve(const double[:, ::1] G, const double[::1] c, double lam,
                const double[::1] weights, double[::1] beta, double[::1] resid,
                double[::1] thresh, int[::1] all_idx, int[::1] active,
                double tol, int max_iter, double* last_change) noexcept nogil:
    """Run sweeps until a full sweep moves no coefficient by ``tol``.

    Returns the number of sweeps used, or ``-(sweeps)`` on non-convergence.
    """
    cdef Py_ssize_t q = G.shape[0], j, k, n_active
    cdef int n_iter = 0
    cdef double change, acc
    for j in range(q):
        thresh[j] = lam * weights[j]
    for j in range(q):
        acc = c[j]
        for k in range(q):
            if beta[k] != 0.0:
                acc -= G[j, k] * beta[k]
        resid[j] = acc
    while n_iter < max_iter:
        change = _sweep(G, resid, beta, thresh, all_idx, q)
        n_iter += 1
        last_change[0] = change
        if change < tol:
            return n_iter
        n_active = 0
        for j in range(q):
            if beta[j] != 0.0:
                active[n_active] = <int>j
                n_active += 1
        while n_iter < max_iter:
            change = _sweep(G, resid, beta, thresh, active, n_active)
            n_iter += 1
            last_change[0] = change
            if change < tol:
                break
    return -n_iter


def cd_gram(G, c, double lam, weights, beta, double tol=1e-7, int max_iter=10000):
    """Solve one lasso problem in place; returns ``(n_iter, last_change, converged)``."""
    cdef double[:, ::1] Gv = np.ascontiguousarray(G, dtype=np.float64)
    cdef double[::1] cv = np.ascontiguousarray(c, dtype=np.float64)
    cdef double[::1] wv = np.ascontiguousarray(weights, dtype=np.float64)
    cdef double[::1] bv = beta
    cdef Py_ssize_t q = Gv.shape[0]
    cdef double[::1] resid = np.empty(q)
    cdef double[::1] thresh = np.empty(q)
    cdef int[::1] all_idx = np.arange(q, dtype=np.intc)
    cdef int[::1] active = np.empty(q, dtype=np.intc)
    cdef double last = 0.0
    cdef int it
    with nogil:
        it = _solve(Gv, cv, lam, wv, bv, resid, thresh, all_idx, active, tol, max_iter, &last)
    return abs(it), last, it > 0


def cd_path(G, c, lambdas, weights, beta0=None, double tol=1e-7, int max_iter=10000):
    """Warm-started solutions along ``lambdas``; returns ``(coefs, n_iter, converged)``."""
    cdef double[:, ::1] Gv = np.ascontiguousarray(G, dtype=np.float64)
    cdef double[::1] cv = np.ascontiguousarray(c, dtype=np.float64)
    cdef double[::1] wv = np.ascontiguousarray(weights, dtype=np.float64)
    cdef double[::1] lv = np.ascontiguousarray(lambdas, dtype=np.float64)
    cdef Py_ssize_t q = Gv.shape[0], L = lv.shape[0], i, j
    out = np.zeros((L, q))
    iters = np.zeros(L, dtype=np.intc)
    conv = np.zeros(L, dtype=bool)
    cdef double[:, ::1] ov = out
    cdef int[::1] itv = iters
    beta_arr = np.zeros(q) if beta0 is None else np.array(beta0, dtype=np.float64)
    cdef double[::1] bv = beta_arr
    cdef double[::1] resid = np.empty(q)
    cdef double[::1] thresh = np.empty(q)
    cdef int[::1] all_idx = np.arange(q, dtype=np.intc)
    cdef int[::1] active = np.empty(q, dtype=np.intc)
    cdef double last = 0.0
    cdef int it
    for i in range(L):
        with nogil:
            it = _solve(Gv, cv, lv[i], wv, bv, resid, thresh, all_idx, active, tol, max_iter, &last)
            for j in range(q):
                ov[i, j] = bv[j]
        itv[i] = abs(it)
        conv[i] = it > 0
    return out, iters, conv
