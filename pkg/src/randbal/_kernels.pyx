# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: cyclic Jacobi, swap-Metropolis chains, logistic IRLS.

Each routine follows ``_kernels_py`` step for step so both backends agree
to rounding.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, sqrt, exp, log1p
from libc.stdlib cimport malloc, free

cnp.import_array()

BACKEND = "cython"


def jacobi_eigh(a, int max_sweeps=100):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] A_arr = np.array(a, dtype=np.float64, copy=True, order="C")
    cdef Py_ssize_t k = A_arr.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] V_arr = np.eye(k)
    cdef double[:, ::1] A = A_arr
    cdef double[:, ::1] V = V_arr
    cdef Py_ssize_t p, q, r
    cdef int sweep, sweeps = 0
    cdef double sm, thresh, apq, g, app, aqq, hdiff, theta, t, c, s, x, y
    with nogil:
        for sweep in range(1, max_sweeps + 1):
            sm = 0.0
            for p in range(k - 1):
                for q in range(p + 1, k):
                    sm += fabs(A[p, q])
            if sm == 0.0:
                break
            sweeps = sweep
            if sweep < 4:
                thresh = 0.2 * sm / (k * k)
            else:
                thresh = 0.0
            for p in range(k - 1):
                for q in range(p + 1, k):
                    apq = A[p, q]
                    g = 100.0 * fabs(apq)
                    app = A[p, p]
                    aqq = A[q, q]
                    if sweep > 4 and fabs(app) + g == fabs(app) and fabs(aqq) + g == fabs(aqq):
                        A[p, q] = 0.0
                        A[q, p] = 0.0
                        continue
                    if fabs(apq) <= thresh:
                        continue
                    hdiff = aqq - app
                    if fabs(hdiff) + g == fabs(hdiff):
                        t = apq / hdiff
                    else:
                        theta = 0.5 * hdiff / apq
                        t = 1.0 / (fabs(theta) + sqrt(1.0 + theta * theta))
                        if theta < 0.0:
                            t = -t
                    c = 1.0 / sqrt(1.0 + t * t)
                    s = t * c
                    for r in range(k):
                        x = A[r, p]
                        y = A[r, q]
                        A[r, p] = c * x - s * y
                        A[r, q] = s * x + c * y
                    for r in range(k):
                        A[p, r] = A[r, p]
                        A[q, r] = A[r, q]
                    A[p, p] = app - t * apq
                    A[q, q] = aqq + t * apq
                    A[p, q] = 0.0
                    A[q, p] = 0.0
                    for r in range(k):
                        x = V[r, p]
                        y = V[r, q]
                        V[r, p] = c * x - s * y
                        V[r, q] = s * x + c * y
    return np.diag(A_arr).copy(), V_arr, sweeps


def swap_chains(cnp.int8_t[:, ::1] Z, const double[::1] psi, const cnp.int64_t[::1] starts,
                const cnp.int64_t[::1] sizes, const cnp.int64_t[::1] steps,
                const cnp.int64_t[::1] offsets, const double[:, ::1] U):
    cdef Py_ssize_t R = Z.shape[0]
    cdef Py_ssize_t M = starts.shape[0]
    cdef Py_ssize_t r, m, i, j, lo, hi, nt, nc, a, b, s, off, width = 0
    cdef long long accepted = 0
    cdef double delta
    for m in range(M):
        if sizes[m] > width:
            width = sizes[m]
    cdef Py_ssize_t* treated = <Py_ssize_t*> malloc(max(width, 1) * sizeof(Py_ssize_t))
    cdef Py_ssize_t* control = <Py_ssize_t*> malloc(max(width, 1) * sizeof(Py_ssize_t))
    if treated == NULL or control == NULL:
        free(treated)
        free(control)
        raise MemoryError()
    try:
        with nogil:
            for r in range(R):
                for m in range(M):
                    lo = starts[m]
                    hi = lo + sizes[m]
                    nt = 0
                    nc = 0
                    for i in range(lo, hi):
                        if Z[r, i]:
                            treated[nt] = i
                            nt += 1
                        else:
                            control[nc] = i
                            nc += 1
                    off = offsets[m]
                    for s in range(steps[m]):
                        a = <Py_ssize_t> (U[r, off + 3 * s] * nt)
                        b = <Py_ssize_t> (U[r, off + 3 * s + 1] * nc)
                        i = treated[a]
                        j = control[b]
                        delta = psi[j] - psi[i]
                        if delta >= 0.0 or U[r, off + 3 * s + 2] < exp(delta):
                            Z[r, i] = 0
                            Z[r, j] = 1
                            treated[a] = j
                            control[b] = i
                            accepted += 1
    finally:
        free(treated)
        free(control)
    return accepted


cdef inline double _softplus(double t) nogil:
    if t > 0.0:
        return t + log1p(exp(-t))
    return log1p(exp(t))


cdef double _deviance(const double[::1] eta, const double[::1] y, Py_ssize_t n) nogil:
    cdef double dev = 0.0
    cdef Py_ssize_t i
    for i in range(n):
        if y[i] > 0.5:
            dev += _softplus(-eta[i])
        else:
            dev += _softplus(eta[i])
    return 2.0 * dev


cdef void _linpred(const double[:, ::1] X, const double[::1] beta, double[::1] eta,
                   Py_ssize_t n, Py_ssize_t p) nogil:
    cdef Py_ssize_t i, j
    cdef double acc
    for i in range(n):
        acc = 0.0
        for j in range(p):
            acc += X[i, j] * beta[j]
        eta[i] = acc


def irls_logistic(X_in, y_in, double tol=1e-10, int max_iter=50):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] X_arr = np.ascontiguousarray(X_in, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] y_arr = np.ascontiguousarray(y_in, dtype=np.float64)
    cdef const double[:, ::1] X = X_arr
    cdef const double[::1] y = y_arr
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t p = X.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] beta_arr = np.zeros(p)
    cdef double[::1] beta = beta_arr
    cdef double[::1] beta_new = np.zeros(p)
    cdef double[::1] eta = np.zeros(n)
    cdef double[::1] eta_new = np.zeros(n)
    cdef double[::1] w = np.zeros(n)
    cdef double[::1] work = np.zeros(n)
    cdef double[:, ::1] A = np.zeros((p, p))
    cdef double[::1] rhs = np.zeros(p)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] hist_arr = np.zeros(max_iter + 1)
    cdef double[::1] hist = hist_arr
    cdef Py_ssize_t i, j, l, it, n_iter = 0, n_hist = 1
    cdef int halvings
    cdef bint converged = False, failed = False
    cdef double dev, dev_new, mu, e, acc, rel
    with nogil:
        dev = _deviance(eta, y, n)
        hist[0] = dev
        for it in range(1, max_iter + 1):
            for i in range(n):
                if eta[i] >= 0.0:
                    e = exp(-eta[i])
                    mu = 1.0 / (1.0 + e)
                else:
                    e = exp(eta[i])
                    mu = e / (1.0 + e)
                w[i] = mu * (1.0 - mu)
                if w[i] < 1e-10:
                    w[i] = 1e-10
                work[i] = eta[i] + (y[i] - mu) / w[i]
            for j in range(p):
                for l in range(j + 1):
                    acc = 0.0
                    for i in range(n):
                        acc += X[i, j] * w[i] * X[i, l]
                    A[j, l] = acc
                acc = 0.0
                for i in range(n):
                    acc += X[i, j] * w[i] * work[i]
                rhs[j] = acc
            # in-place Cholesky, lower triangle
            for j in range(p):
                acc = A[j, j]
                for l in range(j):
                    acc -= A[j, l] * A[j, l]
                if acc <= 0.0:
                    failed = True
                    break
                A[j, j] = sqrt(acc)
                for i in range(j + 1, p):
                    acc = A[i, j]
                    for l in range(j):
                        acc -= A[i, l] * A[j, l]
                    A[i, j] = acc / A[j, j]
            if failed:
                break
            for j in range(p):
                acc = rhs[j]
                for l in range(j):
                    acc -= A[j, l] * beta_new[l]
                beta_new[j] = acc / A[j, j]
            for j in range(p - 1, -1, -1):
                acc = beta_new[j]
                for l in range(j + 1, p):
                    acc -= A[l, j] * beta_new[l]
                beta_new[j] = acc / A[j, j]
            _linpred(X, beta_new, eta_new, n, p)
            dev_new = _deviance(eta_new, y, n)
            halvings = 0
            while dev_new > dev and halvings < 30:
                for j in range(p):
                    beta_new[j] = 0.5 * (beta[j] + beta_new[j])
                _linpred(X, beta_new, eta_new, n, p)
                dev_new = _deviance(eta_new, y, n)
                halvings += 1
            if dev_new > dev:
                break
            n_iter = it
            rel = fabs(dev - dev_new) / (fabs(dev_new) + 0.1)
            for j in range(p):
                beta[j] = beta_new[j]
            for i in range(n):
                eta[i] = eta_new[i]
            dev = dev_new
            hist[n_hist] = dev
            n_hist += 1
            if rel < tol:
                converged = True
                break
    return beta_arr, dev, n_iter, bool(converged), hist_arr[:n_hist].copy()
