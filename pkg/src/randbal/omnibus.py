"""Combined balance statistic over several covariates.

``d2 = d' C^- d`` where ``d`` stacks the adjusted differences and ``C`` is
their randomization covariance. Because ``d`` is linear in the covariates,
``d2`` also tests every linear combination of them; its large-sample
reference is chi-square on ``rank(C)`` degrees of freedom.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import chdtrc

from . import kernels
from .balance import (
    _TIE_FLOOR,
    Contrast,
    MidP,
    _as_matrix,
    _check_rows,
    degenerate_columns,
    reference_mid_p,
    variance_d,
)
from .data import BalanceError, CovariateMatrix, Design, check_assignment
from .randomization import DEFAULT_ENUMERATION_CAP

EPS = np.finfo(np.float64).eps


def symmetric_eigh(a: np.ndarray, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Eigenvalues (ascending) and eigenvectors of a symmetric matrix by cyclic Jacobi.

    Sweeps continue until every off-diagonal entry is negligible against
    both of its diagonal entries, which leaves the off-diagonal mass far
    below ``1e-12 * max|eigenvalue|``.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise BalanceError("symmetric_eigh needs a square matrix")
    if a.shape[0] == 0:
        return np.zeros(0), np.zeros((0, 0))
    w, v, _ = kernels.jacobi_eigh(0.5 * (a + a.T), max_sweeps)
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


def rank_tolerance(eigenvalues: np.ndarray) -> float:
    """Spectral cutoff ``k * eps * max eigenvalue``."""
    if eigenvalues.size == 0:
        return 0.0
    return float(eigenvalues.size * EPS * max(float(eigenvalues.max()), 0.0))


def pseudo_inverse(C: np.ndarray) -> tuple[np.ndarray, int, float]:
    """Moore-Penrose inverse of a symmetric PSD matrix.

    Returns ``(C_plus, rank, tolerance)``; eigenvalues at or below the
    tolerance are treated as zero.
    """
    w, V = symmetric_eigh(C)
    tol = rank_tolerance(w)
    keep = w > tol
    Vk = V[:, keep]
    return (Vk / w[keep]) @ Vk.T, int(keep.sum()), tol


@dataclass(frozen=True, eq=False)
class QuadraticForm:
    """Whitening map for ``d' C^- d``.

    Degenerate (within-block constant) covariates are dropped, the rest are
    scaled to unit variance, and the correlation matrix is inverted on its
    numerical range. ``d2 = |d @ P|^2`` for every ``d`` in the column space
    of ``C``, which is where every realizable difference vector lies.
    """

    P: np.ndarray
    df: int
    tolerance: float

    @classmethod
    def from_covariance(cls, C: np.ndarray, degenerate: np.ndarray | None = None) -> "QuadraticForm":
        C = np.atleast_2d(np.asarray(C, dtype=np.float64))
        k = C.shape[0]
        keep = ~degenerate if degenerate is not None else np.diag(C) > 0
        idx = np.nonzero(keep)[0]
        if idx.size == 0:
            return cls(np.zeros((k, 0)), 0, 0.0)
        sd = np.sqrt(np.diag(C)[idx])
        R = C[np.ix_(idx, idx)] / np.outer(sd, sd)
        w, V = symmetric_eigh(R)
        tol = rank_tolerance(w)
        pos = w > tol
        P = np.zeros((k, int(pos.sum())))
        P[idx] = (V[:, pos] / np.sqrt(w[pos])) / sd[:, None]
        return cls(P, int(pos.sum()), tol)

    def __call__(self, D: np.ndarray) -> np.ndarray:
        return ((np.atleast_2d(D) @ self.P) ** 2).sum(axis=1)


def chi2_sf(x: float, df: int) -> float:
    """Upper-tail chi-square probability via the regularized incomplete gamma."""
    if not (isinstance(df, (int, np.integer)) and df >= 1):
        raise BalanceError(f"degrees of freedom must be a positive integer, got {df!r}")
    if not x >= 0:
        raise BalanceError(f"chi-square statistic must be nonnegative, got {x!r}")
    return float(chdtrc(df, x))


@dataclass(frozen=True)
class OmnibusResult:
    d2: float
    df: int
    p_chi2: float
    rank_tolerance: float
    degenerate: bool
    mid_p: MidP | None = None

    def as_dict(self) -> dict:
        out = {
            "d2": self.d2,
            "df": self.df,
            "p_chi2": None if self.degenerate else self.p_chi2,
            "rank_tolerance": self.rank_tolerance,
            "degenerate": self.degenerate,
        }
        if self.mid_p is not None:
            out["mid_p"] = {"p": self.mid_p.p, "stderr": self.mid_p.stderr,
                            "reps": self.mid_p.reps, "mode": self.mid_p.mode}
        return out


def omnibus_form(design: Design, X, weights=None) -> QuadraticForm:
    Xm, _ = _as_matrix(X)
    C = variance_d(design, Xm, weights)
    return QuadraticForm.from_covariance(C, degenerate_columns(design, Xm, weights, C))


def compute_d2(design: Design, z, X, weights=None, mode: str = "normal", reps: int | None = None,
               seed=None, workers: int | None = None) -> OmnibusResult:
    """Omnibus balance statistic for assignment ``z`` with its chi-square p-value.

    With ``mode`` ``exact`` or ``mc`` a randomization mid-p value is
    attached as well.
    """
    if isinstance(X, CovariateMatrix):
        X = design.align(X)
    Xm, _ = _as_matrix(X)
    _check_rows(design, Xm)
    z = check_assignment(design, z)
    contrast = Contrast.for_design(design, weights)
    form = omnibus_form(design, Xm, weights)
    d = contrast.apply(z[None, :].astype(np.float64), Xm)
    d2 = float(form(d)[0])
    if form.df == 0:
        return OmnibusResult(0.0, 0, math.nan, form.tolerance, True,
                             _d2_reference(design, form, contrast, Xm, d2, mode, reps, seed, workers))
    return OmnibusResult(d2, form.df, chi2_sf(d2, form.df), form.tolerance, False,
                         _d2_reference(design, form, contrast, Xm, d2, mode, reps, seed, workers))


def _d2_reference(design, form, contrast, Xm, d2, mode, reps, seed, workers, cap=DEFAULT_ENUMERATION_CAP):
    if mode == "normal":
        return None
    return reference_mid_p(design, lambda Z: form(contrast.apply(Z, Xm))[:, None], d2,
                           _TIE_FLOOR, mode, reps, seed, cap, workers)[0]


def d2_mid_p(design: Design, z_obs, X, weights=None, mode: str = "exact", reps: int | None = None,
             seed=None, cap: int = DEFAULT_ENUMERATION_CAP, workers: int | None = None) -> MidP:
    """Randomization mid-p value of ``d2``, larger values more extreme.

    The covariance (and hence the quadratic form) depends only on the
    design, so it is built once and applied to every reference assignment.
    """
    if isinstance(X, CovariateMatrix):
        X = design.align(X)
    Xm, _ = _as_matrix(X)
    _check_rows(design, Xm)
    contrast = Contrast.for_design(design, weights)
    form = omnibus_form(design, Xm, weights)
    obs = float(form(contrast.apply(check_assignment(design, z_obs)[None, :].astype(np.float64), Xm))[0])
    return _d2_reference(design, form, contrast, Xm, obs, mode, reps, seed, workers, cap)
