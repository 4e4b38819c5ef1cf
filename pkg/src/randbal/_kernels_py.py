"""Pure-Python reference kernels.

These mirror the compiled kernels in ``_kernels.pyx`` operation for
operation. They are used when the extension is not built, or when
``RANDBAL_PURE_PYTHON=1`` is set.
"""

import math

import numpy as np
from scipy.linalg import solve_triangular

BACKEND = "python"


def jacobi_eigh(a, max_sweeps=100):
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Parameters
    ----------
    a : ndarray, shape (k, k)
        Symmetric matrix. Not modified.
    max_sweeps : int
        Upper bound on the number of full cyclic sweeps.

    Returns
    -------
    w : ndarray, shape (k,)
        Eigenvalues, unsorted.
    v : ndarray, shape (k, k)
        Orthonormal eigenvectors stored as columns.
    sweeps : int
        Number of sweeps performed.
    """
    A = np.array(a, dtype=np.float64, copy=True)
    k = A.shape[0]
    V = np.eye(k)
    sweeps = 0
    for sweep in range(1, max_sweeps + 1):
        sm = float(np.abs(np.triu(A, 1)).sum())
        if sm == 0.0:
            break
        sweeps = sweep
        thresh = 0.2 * sm / (k * k) if sweep < 4 else 0.0
        for p in range(k - 1):
            for q in range(p + 1, k):
                apq = A[p, q]
                g = 100.0 * abs(apq)
                app = A[p, p]
                aqq = A[q, q]
                if sweep > 4 and abs(app) + g == abs(app) and abs(aqq) + g == abs(aqq):
                    A[p, q] = 0.0
                    A[q, p] = 0.0
                    continue
                if abs(apq) <= thresh:
                    continue
                hdiff = aqq - app
                if abs(hdiff) + g == abs(hdiff):
                    t = apq / hdiff
                else:
                    theta = 0.5 * hdiff / apq
                    t = 1.0 / (abs(theta) + math.sqrt(1.0 + theta * theta))
                    if theta < 0.0:
                        t = -t
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = t * c
                colp = A[:, p].copy()
                colq = A[:, q].copy()
                newp = c * colp - s * colq
                newq = s * colp + c * colq
                A[:, p] = newp
                A[:, q] = newq
                A[p, :] = newp
                A[q, :] = newq
                A[p, p] = app - t * apq
                A[q, q] = aqq + t * apq
                A[p, q] = 0.0
                A[q, p] = 0.0
                vp = V[:, p].copy()
                vq = V[:, q].copy()
                V[:, p] = c * vp - s * vq
                V[:, q] = s * vp + c * vq
    return np.diag(A).copy(), V, sweeps


def swap_chains(Z, psi, starts, sizes, steps, offsets, U):
    """Run swap-Metropolis chains in place, one per (replicate, block).

    ``Z`` holds the starting assignments (one replicate per row) and is
    overwritten with the final states. Each proposal exchanges one treated
    and one control cluster of the block and consumes three uniforms from
    ``U[r, offsets[m] + 3*s : offsets[m] + 3*s + 3]``.

    Returns the number of accepted proposals.
    """
    accepted = 0
    R = Z.shape[0]
    for r in range(R):
        z = Z[r]
        u = U[r]
        for m in range(len(starts)):
            lo = int(starts[m])
            hi = lo + int(sizes[m])
            treated = [i for i in range(lo, hi) if z[i]]
            control = [i for i in range(lo, hi) if not z[i]]
            nt = len(treated)
            nc = len(control)
            off = int(offsets[m])
            for s in range(int(steps[m])):
                a = int(u[off + 3 * s] * nt)
                b = int(u[off + 3 * s + 1] * nc)
                i = treated[a]
                j = control[b]
                delta = psi[j] - psi[i]
                if delta >= 0.0 or u[off + 3 * s + 2] < math.exp(delta):
                    z[i] = 0
                    z[j] = 1
                    treated[a] = j
                    control[b] = i
                    accepted += 1
    return accepted


def _softplus(t):
    return np.maximum(t, 0.0) + np.log1p(np.exp(-np.abs(t)))


def _deviance(eta, y):
    return 2.0 * float(np.sum(np.where(y > 0.5, _softplus(-eta), _softplus(eta))))


def _expit(eta):
    e = np.exp(-np.abs(eta))
    return np.where(eta >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def irls_logistic(X, y, tol=1e-10, max_iter=50):
    """Fit a logistic regression by IRLS with step halving.

    ``X`` must have full column rank. Returns ``(beta, deviance, n_iter,
    converged, history)`` where ``history`` holds the deviance at the start
    and after every accepted iteration.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    p = X.shape[1]
    beta = np.zeros(p)
    eta = np.zeros(X.shape[0])
    dev = _deviance(eta, y)
    history = [dev]
    converged = False
    n_iter = 0
    for it in range(1, max_iter + 1):
        mu = _expit(eta)
        w = np.maximum(mu * (1.0 - mu), 1e-10)
        work = eta + (y - mu) / w
        A = X.T @ (X * w[:, None])
        rhs = X.T @ (w * work)
        try:
            L = np.linalg.cholesky(A)
        except np.linalg.LinAlgError:
            break
        beta_new = solve_triangular(L.T, solve_triangular(L, rhs, lower=True), lower=False)
        eta_new = X @ beta_new
        dev_new = _deviance(eta_new, y)
        halvings = 0
        while dev_new > dev and halvings < 30:
            beta_new = 0.5 * (beta + beta_new)
            eta_new = X @ beta_new
            dev_new = _deviance(eta_new, y)
            halvings += 1
        if dev_new > dev:
            break
        n_iter = it
        rel = abs(dev - dev_new) / (abs(dev_new) + 0.1)
        beta, eta, dev = beta_new, eta_new, dev_new
        history.append(dev)
        if rel < tol:
            converged = True
            break
    return beta, dev, n_iter, converged, np.asarray(history)
