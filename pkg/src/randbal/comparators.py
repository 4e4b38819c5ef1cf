"""Balance tests that ignore the randomization design.

Two common procedures, kept for comparison with the design-based tests:
a two-sample z-test over measurement units that pretends units were
randomized individually, and a logistic-regression deviance test of
assignment on covariates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import qr
from scipy.special import expit

from . import kernels
from .balance import normal_p
from .data import BalanceError, CovariateMatrix, Design, InputError, check_assignment
from .omnibus import EPS, chi2_sf, symmetric_eigh

SEPARATION_CAP = 15.0


def noclus_z_test(x, z) -> tuple[float, float]:
    """Unit-level two-sample z-test that ignores clusters and blocks.

    Parameters
    ----------
    x : array_like
        Covariate value of every measurement unit.
    z : array_like
        Treatment indicator of every measurement unit.

    Returns
    -------
    z_score, p : float
        ``(mean_t - mean_c) / (s * sqrt(1/m_t + 1/m_c))`` with ``s`` the
        overall unit-level s.d., and its two-sided Normal p-value.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    z = np.asarray(z).ravel()
    if x.shape != z.shape:
        raise InputError("x and z must have one entry per unit")
    if not np.all((z == 0) | (z == 1)):
        raise InputError("assignment must be binary")
    t = z == 1
    mt, mc = int(t.sum()), int((~t).sum())
    if mt == 0 or mc == 0:
        raise BalanceError("both groups need at least one unit")
    s = x.std(ddof=1)
    if not s > 1e-12 * max(np.abs(x).max(), 1e-300):
        raise BalanceError("covariate has zero standard deviation")
    zs = (x[t].mean() - x[~t].mean()) / (s * math.sqrt(1.0 / mt + 1.0 / mc))
    return float(zs), float(normal_p(zs))


def noclus_z_test_units(design: Design, X: CovariateMatrix, covariate: str, z=None):
    """:func:`noclus_z_test` on the unit-level data attached to ``X``.

    Units whose cluster falls outside the design (degenerate blocks) are
    dropped, as they are from the clustered tests.
    """
    if X.units is None or covariate not in X.units.names:
        raise InputError(f"unit-level values of {covariate!r} are not available")
    z = design.z if z is None else check_assignment(design, z)
    zc = dict(zip(design.cluster_ids, z))
    ids = X.cluster_ids
    unit_ids = [ids[r] for r in X.units.cluster_row]
    keep = np.array([c in zc for c in unit_ids])
    zu = np.array([zc[c] for c, k in zip(unit_ids, keep) if k], dtype=np.int8)
    xu = X.units.values[keep, X.units.names.index(covariate)]
    return noclus_z_test(xu, zu)


@dataclass(frozen=True)
class LogisticFit:
    """Result of a logistic regression fit by IRLS.

    ``coefficients`` has one entry per input column; dropped (aliased)
    columns get ``nan``.
    """

    coefficients: np.ndarray
    std_errors: np.ndarray
    deviance: float
    converged: bool
    iterations: int
    separation_flag: bool
    history: np.ndarray
    kept: np.ndarray
    rank: int


def column_rank(X: np.ndarray) -> tuple[np.ndarray, int]:
    """Independent columns of ``X`` by the spectral rule used for ``d2``.

    Columns are scaled to unit length, the rank counts eigenvalues of the
    Gram matrix above ``p * eps * max eigenvalue``, and QR with column
    pivoting chooses which columns to keep. Returns the sorted kept
    indices and the rank.
    """
    X = np.asarray(X, dtype=np.float64)
    p = X.shape[1]
    norms = np.sqrt((X**2).sum(axis=0))
    nonzero = np.nonzero(norms > 0)[0]
    if nonzero.size == 0:
        return np.zeros(0, dtype=np.int64), 0
    Xs = X[:, nonzero] / norms[nonzero]
    w, _ = symmetric_eigh(Xs.T @ Xs)
    rank = int((w > p * EPS * w.max()).sum())
    _, _, piv = qr(Xs, mode="economic", pivoting=True)
    return np.sort(nonzero[piv[:rank]]), rank


def _check_fit_inputs(y, X):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[1] == 0:
        raise InputError("design matrix is empty")
    if not np.all(np.isfinite(X)):
        raise InputError("design matrix contains non-finite values")
    y = np.asarray(y, dtype=np.float64).ravel()
    if y.shape[0] != X.shape[0]:
        raise InputError(f"response has {y.size} entries, design matrix {X.shape[0]} rows")
    if not np.all((y == 0) | (y == 1)):
        raise InputError("response must be binary")
    return y, X


def _fit_kept(y, X, kept, rank, p, tol, max_iter) -> LogisticFit:
    Xk = np.ascontiguousarray(X[:, kept])
    beta, dev, n_iter, converged, hist = kernels.irls_logistic(Xk, y, tol, max_iter)
    eta = Xk @ beta
    mu = expit(eta)
    w = np.maximum(mu * (1.0 - mu), 1e-10)
    try:
        cov = np.linalg.inv(Xk.T @ (Xk * w[:, None]))
        se_k = np.sqrt(np.maximum(np.diag(cov), 0.0))
    except np.linalg.LinAlgError:
        se_k = np.full(kept.size, np.nan)
    coef = np.full(p, np.nan)
    se = np.full(p, np.nan)
    coef[kept] = beta
    se[kept] = se_k
    separated = bool(np.any(np.abs(beta) > SEPARATION_CAP))
    return LogisticFit(coef, se, float(dev), bool(converged), int(n_iter), separated,
                       np.asarray(hist), kept, rank)


def fit_logistic(y, X, tol: float = 1e-10, max_iter: int = 50) -> LogisticFit:
    """Logistic regression of a binary ``y`` on the columns of ``X``.

    IRLS with step halving stops when the relative deviance change
    ``|dev_old - dev_new| / (|dev_new| + 0.1)`` falls below ``tol`` or after
    ``max_iter`` iterations. Aliased columns are dropped first. When any
    fitted coefficient exceeds 15 in magnitude the data are taken to be
    (quasi-)separated: ``separation_flag`` is set and the deviance is
    reported as reached.

    The caller supplies the intercept or block indicator columns.
    """
    y, X = _check_fit_inputs(y, X)
    kept, rank = column_rank(X)
    if rank == 0:
        raise InputError("design matrix has no nonzero columns")
    return _fit_kept(y, X, kept, rank, X.shape[1], tol, max_iter)


def block_indicators(design: Design) -> np.ndarray:
    """One indicator column per block, in design order."""
    D = np.zeros((design.n_clusters, design.B))
    D[np.arange(design.n_clusters), design.block_index] = 1.0
    return D


def null_deviance(design: Design) -> float:
    """Deviance of the block-indicator-only model.

    Its fitted probabilities are the block treated fractions, which are
    fixed by the design, so the value does not depend on ``z``.
    """
    nt = design.n_treated.astype(np.float64)
    nc = design.sizes - nt
    n = design.sizes
    return float(-2.0 * (nt * np.log(nt / n) + nc * np.log(nc / n)).sum())


@dataclass(frozen=True)
class DevianceResult:
    lrt: float
    df: int
    p: float
    fit: LogisticFit | None
    degenerate: bool = False


class DevianceTest:
    """Likelihood-ratio test of assignment on covariates, given block indicators.

    The model matrix does not depend on the assignment, so column
    selection and the null deviance are computed once and reused for
    every assignment passed to :meth:`run`.
    """

    def __init__(self, design: Design, X, include_size: bool = True,
                 tol: float = 1e-10, max_iter: int = 50):
        if isinstance(X, CovariateMatrix):
            X = design.align(X)
        X = np.asarray(X, dtype=np.float64).reshape(design.n_clusters, -1)
        cols = [block_indicators(design)]
        if include_size:
            cols.append(design.m[:, None])
        cols.append(X)
        self.design = design
        self.M = np.ascontiguousarray(np.hstack(cols))
        if not np.all(np.isfinite(self.M)):
            raise InputError("covariates contain non-finite values")
        self.kept, self.rank = column_rank(self.M)
        self.df = self.rank - design.B
        self.dev_null = null_deviance(design)
        self.tol = tol
        self.max_iter = max_iter

    def run(self, z=None) -> DevianceResult:
        z = self.design.z if z is None else check_assignment(self.design, z)
        if self.df == 0:
            # covariates are constant within blocks: nothing to test
            return DevianceResult(0.0, 0, 1.0, None, True)
        fit = _fit_kept(np.asarray(z, dtype=np.float64), self.M, self.kept, self.rank,
                        self.M.shape[1], self.tol, self.max_iter)
        lrt = self.dev_null - fit.deviance
        if lrt < -1e-6 * max(1.0, self.dev_null):
            raise BalanceError(f"full model deviance exceeds null deviance by {-lrt:.3g}")
        lrt = max(lrt, 0.0)
        return DevianceResult(lrt, self.df, chi2_sf(lrt, self.df), fit)


def deviance_balance_test(design: Design, X, z=None, include_size: bool = True) -> DevianceResult:
    """Regress assignment on block indicators plus covariates, then on the indicators alone.

    Covariates are cluster totals; with ``include_size`` cluster size is
    added as a regressor. Returns the deviance difference, the number of
    independent columns added and the chi-square p-value.
    """
    return DevianceTest(design, X, include_size).run(z)
