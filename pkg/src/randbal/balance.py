"""Adjusted differences of means and their randomization distribution.

For block ``b`` with ``n`` clusters, ``n_t`` of them treated and mean
cluster size ``m_bar``, the adjusted difference on covariate totals ``x`` is

    d(z, x) = sum_b w_b [z_b'x_b / (m_bar_b n_t) - (1 - z_b)'x_b / (m_bar_b (n - n_t))]

Denominators are the expected, not observed, numbers of measurement units
in each arm, which makes ``d`` linear in ``z`` and its randomization
moments exact: mean zero and covariance

    Cov(d(Z, x), d(Z, v)) = sum_b w_b^2 s_b(x; v) / (h_b m_bar_b^2),

with ``h_b = n_t (1 - n_t / n)`` and ``s_b`` the within-block covariance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import erfc

from .data import BalanceError, CovariateMatrix, Design, InputError, check_assignment
from .randomization import (
    DEFAULT_ENUMERATION_CAP,
    assignment_chunks,
    map_replicates,
    sample_uniform_batch,
)

WEIGHT_KINDS = ("harmonic", "block-size", "treated-size", "equal", "custom")
_ALIASES = {"harmonic-star": "harmonic", "harmonic_star": "harmonic", "block_size": "block-size",
            "treated_size": "treated-size"}

TIE_RTOL = 1e-9
_TIE_FLOOR = 1e-12
_DEGENERATE_RSD = 1e-12


@dataclass(frozen=True)
class WeightScheme:
    """How block differences are combined.

    ``harmonic`` (the default) weights block ``b`` in proportion to
    ``h_b * m_bar_b``, which maximizes local power against biased
    assignment. ``block-size`` uses the number of measurement units in the
    block, ``treated-size`` the expected number treated, ``equal`` gives
    every block the same weight, ``custom`` takes ``values`` as given.
    """

    kind: str = "harmonic"
    values: tuple[float, ...] | None = None

    def __post_init__(self):
        kind = _ALIASES.get(self.kind, self.kind)
        if kind not in WEIGHT_KINDS:
            raise BalanceError(f"unknown weight scheme {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        if kind == "custom" and self.values is None:
            raise BalanceError("custom weights need values")

    def resolve(self, design: Design) -> np.ndarray:
        if self.kind == "harmonic":
            raw = design.h * design.m_bar
        elif self.kind == "block-size":
            raw = design.sizes * design.m_bar
        elif self.kind == "treated-size":
            raw = design.n_treated * design.m_bar
        elif self.kind == "equal":
            raw = np.ones(design.B)
        else:
            raw = np.asarray(self.values, dtype=np.float64)
            if raw.shape != (design.B,):
                raise BalanceError(f"custom weights need {design.B} values, got {raw.size}")
        if not np.all(raw > 0) or not np.all(np.isfinite(raw)):
            raise BalanceError("block weights must be finite and positive")
        return raw / raw.sum()


def resolve_weights(design: Design, weights=None) -> np.ndarray:
    """Normalized block weights from a scheme, a scheme name, or an array."""
    if weights is None:
        return WeightScheme().resolve(design)
    if isinstance(weights, WeightScheme):
        return weights.resolve(design)
    if isinstance(weights, str):
        return WeightScheme(weights).resolve(design)
    return WeightScheme("custom", tuple(np.asarray(weights, dtype=np.float64))).resolve(design)


@dataclass(frozen=True, eq=False)
class Contrast:
    """Per-cluster linear form of ``d``: ``d(z, x) = (z * a) @ x - c @ x``."""

    a: np.ndarray
    c: np.ndarray

    @classmethod
    def for_design(cls, design: Design, weights=None) -> "Contrast":
        w = resolve_weights(design, weights)
        bidx = design.block_index
        a = (w / (design.m_bar * design.h))[bidx]
        c = (w / (design.m_bar * (design.sizes - design.n_treated)))[bidx]
        return cls(a, c)

    def apply(self, Z: np.ndarray, X: np.ndarray) -> np.ndarray:
        return (Z * self.a) @ X - self.c @ X

    def term_scale(self, X: np.ndarray) -> np.ndarray:
        """Magnitude of the summed terms; rounding error in ``d`` is a tiny multiple of it."""
        return (self.a + self.c) @ np.abs(X)


def _as_matrix(X) -> tuple[np.ndarray, bool]:
    if isinstance(X, CovariateMatrix):
        return X.values, False
    arr = np.asarray(X, dtype=np.float64)
    return (arr[:, None], True) if arr.ndim == 1 else (arr, False)


def _check_rows(design: Design, X: np.ndarray) -> None:
    if X.shape[0] != design.n_clusters:
        raise InputError(f"covariates have {X.shape[0]} rows, design has {design.n_clusters} clusters")


def compute_d(design: Design, z, x, weights=None):
    """Adjusted treatment-minus-control difference of covariate means.

    ``x`` may be one covariate (returns a float) or an ``(n, k)`` matrix
    (returns a length-``k`` array).
    """
    X, single = _as_matrix(x)
    _check_rows(design, X)
    z = check_assignment(design, z)
    d = Contrast.for_design(design, weights).apply(z[None, :].astype(np.float64), X)[0]
    return float(d[0]) if single else d


def compute_dp(design: Design, z, x, weights=None):
    """Difference of group means per measurement unit, observed denominators.

    Block differences are combined with the same weights as :func:`compute_d`.
    """
    X, single = _as_matrix(x)
    _check_rows(design, X)
    z = check_assignment(design, z).astype(np.float64)
    w = resolve_weights(design, weights)
    out = np.zeros(X.shape[1])
    for b, (lo, n) in enumerate(zip(design.starts, design.sizes)):
        zb = z[lo:lo + n]
        mb = design.m[lo:lo + n]
        mt, mc = zb @ mb, (1 - zb) @ mb
        if mt == 0 or mc == 0:
            raise BalanceError(f"block {design.blocks[b].block_id!r} has an arm with no measurement units")
        out += w[b] * (zb @ X[lo:lo + n] / mt - (1 - zb) @ X[lo:lo + n] / mc)
    return float(out[0]) if single else out


def d_noclus(design: Design, z, x):
    """Difference that ignores cluster sizes, blocks weighted by ``h_b``.

    Equals the least-squares coefficient of ``z`` in a regression of ``x``
    on ``z`` and block indicators.
    """
    X, single = _as_matrix(x)
    _check_rows(design, X)
    z = check_assignment(design, z).astype(np.float64)
    h = design.h
    nt = design.n_treated
    nc = design.sizes - nt
    treated = np.add.reduceat(z[:, None] * X, design.starts, axis=0)
    total = np.add.reduceat(X, design.starts, axis=0)
    diff = treated / nt[:, None] - (total - treated) / nc[:, None]
    out = h @ diff / h.sum()
    return float(out[0]) if single else out


def variance_d(design: Design, X, weights=None):
    """Randomization covariance of ``d(Z, x)`` across covariates."""
    Xm, single = _as_matrix(X)
    _check_rows(design, Xm)
    w = resolve_weights(design, weights)
    if np.any(design.sizes < 2):
        raise BalanceError("every block needs at least two clusters")
    bidx = design.block_index
    means = np.add.reduceat(Xm, design.starts, axis=0) / design.sizes[:, None]
    centered = Xm - means[bidx]
    f = (w / (design.m_bar * np.sqrt(design.h * (design.sizes - 1))))[bidx]
    F = centered * f[:, None]
    C = F.T @ F
    C = 0.5 * (C + C.T)
    return float(C[0, 0]) if single else C


def variance_scale(design: Design, X, weights=None) -> np.ndarray:
    """Uncentered analogue of the diagonal of :func:`variance_d`, per covariate.

    A covariate whose randomization variance is below ``1e-24`` times this
    scale is constant within blocks up to rounding.
    """
    Xm, _ = _as_matrix(X)
    w = resolve_weights(design, weights)
    f = (w**2 / (design.m_bar**2 * design.h * (design.sizes - 1)))[design.block_index]
    return f @ (Xm**2)


def degenerate_columns(design: Design, X, weights=None, C=None) -> np.ndarray:
    Xm, _ = _as_matrix(X)
    if C is None:
        C = variance_d(design, Xm, weights)
    C = np.atleast_2d(C)
    scale = variance_scale(design, Xm, weights)
    return np.diag(C) <= (_DEGENERATE_RSD**2) * scale


def normal_sf(z):
    """Upper tail of the standard Normal, accurate to double precision."""
    return 0.5 * erfc(np.asarray(z, dtype=np.float64) / math.sqrt(2.0))


def normal_cdf(z):
    return normal_sf(-np.asarray(z, dtype=np.float64))


def normal_p(z, alternative: str = "two-sided"):
    z = np.asarray(z, dtype=np.float64)
    if alternative == "two-sided":
        p = erfc(np.abs(z) / math.sqrt(2.0))
    elif alternative == "greater":
        p = normal_sf(z)
    elif alternative == "less":
        p = normal_cdf(z)
    else:
        raise BalanceError(f"unknown alternative {alternative!r}")
    return np.minimum(p, 1.0)


def z_and_normal_p(d: float, var_d: float, alternative: str = "two-sided") -> tuple[float, float]:
    """z-score and Normal-approximation p-value.

    A zero variance gives ``(nan, nan)``: the covariate cannot differ
    between arms, so there is nothing to test.
    """
    if not var_d > 0:
        return math.nan, math.nan
    z = d / math.sqrt(var_d)
    return z, float(normal_p(z, alternative))


@dataclass(frozen=True)
class MidP:
    p: float
    stderr: float | None
    reps: int
    mode: str


def _tally(stats: np.ndarray, obs: np.ndarray, floor: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Counts of replicates strictly more extreme than, and tied with, ``obs``."""
    diff = stats - obs
    tol = TIE_RTOL * np.maximum(np.abs(stats), np.abs(obs)) + floor
    tie = np.abs(diff) <= tol
    return ((diff > 0) & ~tie).sum(axis=0), tie.sum(axis=0)


def reference_mid_p(design: Design, statistic: Callable[[np.ndarray], np.ndarray], observed,
                    floor, mode: str = "exact", reps: int | None = None, seed=None,
                    cap: int = DEFAULT_ENUMERATION_CAP, workers: int | None = None) -> list[MidP]:
    """Mid-p values of a vector of statistics against the uniform law on the design.

    ``statistic`` maps an ``(R, n)`` batch of assignments to ``(R, k)``
    statistics, larger meaning more extreme.
    """
    observed = np.atleast_1d(np.asarray(observed, dtype=np.float64))
    floor = np.broadcast_to(np.asarray(floor, dtype=np.float64), observed.shape)
    if mode == "exact":
        greater = np.zeros(observed.shape)
        ties = np.zeros(observed.shape)
        total = 0
        for Z in assignment_chunks(design, cap=cap):
            g, t = _tally(statistic(Z), observed, floor)
            greater += g
            ties += t
            total += Z.shape[0]
        p = (greater + 0.5 * ties) / total
        return [MidP(float(v), None, total, "exact") for v in p]
    if mode in ("mc", "monte-carlo"):
        if reps is None or reps < 100:
            raise BalanceError("Monte Carlo mid-p needs at least 100 replicates")
        if seed is None:
            raise BalanceError("Monte Carlo mid-p needs a seed")

        def run(start, count):
            Z = sample_uniform_batch(design, seed, start, count)
            return _tally(statistic(Z), observed, floor)

        parts = map_replicates(run, 0, reps, workers=workers)
        greater = sum(g for g, _ in parts)
        ties = sum(t for _, t in parts)
        p = (greater + 0.5 * ties) / reps
        se = np.sqrt(p * (1 - p) / reps)
        return [MidP(float(v), float(s), reps, "mc") for v, s in zip(p, se)]
    raise BalanceError(f"unknown mid-p mode {mode!r}")


def _signed(values: np.ndarray, alternative: str) -> np.ndarray:
    if alternative == "two-sided":
        return np.abs(values)
    if alternative == "greater":
        return values
    if alternative == "less":
        return -values
    raise BalanceError(f"unknown alternative {alternative!r}")


def mid_p(design: Design, z_obs, x, weights=None, mode: str = "exact", reps: int | None = None,
          seed=None, alternative: str = "two-sided", cap: int = DEFAULT_ENUMERATION_CAP,
          workers: int | None = None):
    """Randomization mid-p value of the adjusted difference.

    ``P(|d*| > |d_obs|) + P(|d*| = |d_obs|) / 2`` under the uniform law on
    the design's assignments. Ties are judged with relative tolerance
    ``1e-9``. In ``mc`` mode the probability is estimated from ``reps``
    seeded draws and a standard error is reported.
    """
    X, single = _as_matrix(x)
    _check_rows(design, X)
    contrast = Contrast.for_design(design, weights)
    obs = contrast.apply(check_assignment(design, z_obs)[None, :].astype(np.float64), X)[0]
    floor = _TIE_FLOOR * contrast.term_scale(X)
    out = reference_mid_p(
        design, lambda Z: _signed(contrast.apply(Z, X), alternative), _signed(obs, alternative),
        floor, mode, reps, seed, cap, workers,
    )
    return out[0] if single else out


def std_diff(design: Design, z, x):
    """``d_noclus`` in units of the pooled cluster-level s.d. of ``x``.

    The pooled s.d. is that of a two-sample t-test comparing treatment to
    control clusters. Returns nan when it is zero.
    """
    X, single = _as_matrix(x)
    z = check_assignment(design, z).astype(bool)
    nt, nc = z.sum(), (~z).sum()
    xt, xc = X[z], X[~z]
    ss = ((xt - xt.mean(axis=0)) ** 2).sum(axis=0) + ((xc - xc.mean(axis=0)) ** 2).sum(axis=0)
    dof = nt + nc - 2
    sd = np.sqrt(ss / dof) if dof > 0 else np.full(X.shape[1], np.nan)
    dn = np.atleast_1d(d_noclus(design, z.astype(np.int8), X))
    scale = np.abs(X).max(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(sd > _DEGENERATE_RSD * scale, dn / sd, np.nan)
    return float(out[0]) if single else out


@dataclass(frozen=True)
class BalanceResult:
    name: str
    d: float
    var_d: float
    z_score: float
    p_normal: float
    std_diff: float
    degenerate: bool
    mid_p: MidP | None = None

    def as_dict(self) -> dict:
        out = {
            "covariate": self.name,
            "d": self.d,
            "var_d": self.var_d,
            "z_score": None if self.degenerate else self.z_score,
            "p_normal": None if self.degenerate else self.p_normal,
            "std_diff": None if math.isnan(self.std_diff) else self.std_diff,
            "degenerate": self.degenerate,
        }
        if self.mid_p is not None:
            out["mid_p"] = {"p": self.mid_p.p, "stderr": self.mid_p.stderr,
                            "reps": self.mid_p.reps, "mode": self.mid_p.mode}
        return out


def balance_table(design: Design, X, names: Sequence[str] | None = None, weights=None,
                  mode: str = "normal", reps: int | None = None, seed=None,
                  alternative: str = "two-sided", workers: int | None = None) -> list[BalanceResult]:
    """One :class:`BalanceResult` per covariate for the design's observed assignment.

    ``mode`` is ``normal`` (Normal approximation only), ``exact`` or ``mc``
    (adds randomization mid-p values, sharing one set of draws across
    covariates).
    """
    if isinstance(X, CovariateMatrix):
        names = X.names if names is None else names
        X = design.align(X)
    Xm, _ = _as_matrix(X)
    _check_rows(design, Xm)
    k = Xm.shape[1]
    names = list(names) if names is not None else [f"x{j + 1}" for j in range(k)]
    z = check_assignment(design, design.z)
    contrast = Contrast.for_design(design, weights)
    d = contrast.apply(z[None, :].astype(np.float64), Xm)[0]
    C = variance_d(design, Xm, weights) if k else np.zeros((0, 0))
    degenerate = degenerate_columns(design, Xm, weights, C) if k else np.zeros(0, bool)
    sd = std_diff(design, z, Xm) if k else np.zeros(0)
    mids = [None] * k
    if mode != "normal" and k:
        floor = _TIE_FLOOR * contrast.term_scale(Xm)
        mids = reference_mid_p(
            design, lambda Zb: _signed(contrast.apply(Zb, Xm), alternative),
            _signed(d, alternative), floor, mode, reps, seed, workers=workers,
        )
    out = []
    for j in range(k):
        var = float(C[j, j])
        if degenerate[j]:
            zs, p = math.nan, math.nan
        else:
            zs, p = z_and_normal_p(float(d[j]), var, alternative)
        out.append(BalanceResult(names[j], float(d[j]), var, zs, p, float(sd[j]),
                                 bool(degenerate[j]), mids[j]))
    return out
