"""Synthetic study populations for the simulation experiments.

Two shapes are provided. ``clinics`` mimics a small trial of general
practices: few clusters, right-skewed sizes, covariates that are counts of
patients with some binary characteristic. ``households`` mimics a voter
file subsample: many clusters of one or two voters and a long list of
mostly binary covariates, including sparse indicators.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline
from scipy.special import expit, logit

from ..data import CovariateMatrix, Design, InputError, UnitLevel, design_from_arrays


@dataclass(frozen=True, eq=False)
class SyntheticStudy:
    design: Design
    X: CovariateMatrix

    @property
    def values(self) -> np.ndarray:
        return self.design.align(self.X)


def _assemble(block, z, m, unit_values, unit_cluster, names) -> SyntheticStudy:
    n = len(m)
    totals = np.zeros((n, unit_values.shape[1]))
    np.add.at(totals, unit_cluster, unit_values)
    design, _ = design_from_arrays(block, z, m, totals, names)
    ids = design.cluster_ids
    # design_from_arrays ids are zero-padded positions, sorted within blocks
    order = np.lexsort((np.arange(n), np.asarray(block)))
    rank = np.empty(n, dtype=np.int64)
    rank[order] = np.arange(n)
    row = rank[unit_cluster]
    perm = np.lexsort(tuple(unit_values[:, j] for j in range(unit_values.shape[1] - 1, -1, -1)) + (row,))
    units = UnitLevel(tuple(names), unit_values[perm], row[perm])
    X = CovariateMatrix(tuple(names), totals[order], ids, units)
    return SyntheticStudy(design, X)


def _fixed_assignment(rng, block, n_treated_of) -> np.ndarray:
    block = np.asarray(block)
    z = np.zeros(block.size, dtype=np.int8)
    for b in np.unique(block):
        idx = np.nonzero(block == b)[0]
        z[rng.choice(idx, n_treated_of(idx.size), replace=False)] = 1
    return z


CLINIC_RATES = (0.35, 0.75, 0.60, 0.30)
CLINIC_NAMES = ("assessed", "aspirin", "hypotensives", "lipid_reducers")


def clinics(n: int = 21, n_treated: int = 14, seed: int = 0, skew: float = 1.0,
            median_size: float = 110.0, rate_spread: float = 0.5) -> SyntheticStudy:
    """Clusters of patients with four binary characteristics, one block.

    Sizes are lognormal (log-s.d. ``0.55 * skew``) around ``median_size``.
    Each cluster has its own rate for each characteristic, logit-normal
    around a common base rate with s.d. ``rate_spread`` on the logit scale,
    so covariate totals are skewed counts driven mostly by size.
    """
    if not 1 <= n_treated < n:
        raise InputError("need 1 <= n_treated < n")
    rng = np.random.default_rng(seed)
    m = np.maximum(5, np.rint(median_size * np.exp(0.55 * skew * rng.standard_normal(n)))).astype(np.int64)
    rates = expit(logit(np.array(CLINIC_RATES)) + rate_spread * rng.standard_normal((n, 4)))
    counts = rng.binomial(m[:, None], rates)
    unit_cluster = np.repeat(np.arange(n), m)
    pos = np.arange(m.sum()) - np.repeat(np.cumsum(m) - m, m)
    unit_values = (pos[:, None] < counts[unit_cluster]).astype(np.float64)
    block = np.zeros(n, dtype=np.int64)
    z = _fixed_assignment(rng, block, lambda size: n_treated)
    return _assemble(block, z, m, unit_values, unit_cluster, CLINIC_NAMES)


def age_basis(age: np.ndarray) -> np.ndarray:
    """Six cubic B-spline columns with interior knots at the age quintiles.

    The full basis has eight functions; the two boundary functions are
    dropped.
    """
    lo, hi = float(age.min()), float(age.max())
    inner = np.quantile(age, [0.2, 0.4, 0.6, 0.8])
    t = np.concatenate([[lo] * 4, inner, [hi] * 4])
    B = BSpline.design_matrix(np.clip(age, lo, hi), t, 3).toarray()
    return B[:, 1:7]


def households(n: int = 100, treated_fraction: float = 0.22, seed: int = 0, n_wards: int = 29,
               p_two: float = 0.33, ward_concentration: float = 5.0) -> SyntheticStudy:
    """Households of one or two voters with 38 covariates, one block.

    Voter covariates are three binary indicators (voted before, party
    member, registered recently), six age spline columns and one indicator
    per ward. Wards are household-level and unevenly populated, so several
    ward columns are sparse.
    """
    rng = np.random.default_rng(seed)
    m = 1 + (rng.random(n) < p_two).astype(np.int64)
    ward = rng.choice(n_wards, size=n, p=rng.dirichlet(np.full(n_wards, ward_concentration)))
    unit_cluster = np.repeat(np.arange(n), m)
    v = unit_cluster.size
    age = np.clip(18 + rng.gamma(4.0, 8.0, size=v), 18, 95)
    voted = (rng.random(v) < expit(-1.5 + 0.04 * (age - 18))).astype(np.float64)
    party = (rng.random(v) < 0.6).astype(np.float64)
    recent = (rng.random(v) < expit(1.0 - 0.06 * (age - 18))).astype(np.float64)
    wards = np.zeros((v, n_wards))
    wards[np.arange(v), ward[unit_cluster]] = 1.0
    unit_values = np.column_stack([voted, party, recent, age_basis(age), wards])
    names = (("voted_before", "party_member", "recent_registrant")
             + tuple(f"age_spline_{j}" for j in range(1, 7))
             + tuple(f"ward_{w + 1}" for w in range(n_wards)))
    block = np.zeros(n, dtype=np.int64)
    nt = int(np.clip(np.floor(n * treated_fraction + 0.5), 1, n - 1))
    z = _fixed_assignment(rng, block, lambda size: nt)
    return _assemble(block, z, m, unit_values, unit_cluster, names)


def paired_blocks(n_blocks: int = 2000, seed: int = 0) -> SyntheticStudy:
    """``n_blocks`` blocks of two unit-size clusters, one treated in each.

    The single covariate is standard Normal, then centered and scaled to
    unit s.d. over all clusters.
    """
    return block_mixture([{"n": 2, "n_treated": 1, "m": 1, "count": n_blocks}], seed=seed)


def block_mixture(blocks, seed: int = 0, standardize: bool = True) -> SyntheticStudy:
    """Design assembled from block templates.

    ``blocks`` is a list of dicts with keys ``n``, ``n_treated``, ``m``
    (common cluster size) and ``count`` (number of such blocks). The single
    covariate ``x`` is a cluster total drawn as a sum of ``m`` standard
    Normal unit values; with ``standardize`` the totals are centered and
    scaled to unit s.d.
    """
    rng = np.random.default_rng(seed)
    block, m, nts = [], [], []
    b = 0
    for spec in blocks:
        n, nt, size, count = int(spec["n"]), int(spec["n_treated"]), int(spec["m"]), int(spec["count"])
        if not (n >= 2 and 1 <= nt < n and size >= 1 and count >= 1):
            raise InputError(f"invalid block template {spec!r}")
        for _ in range(count):
            block.extend([b] * n)
            m.extend([size] * n)
            nts.append(nt)
            b += 1
    block = np.array(block)
    m = np.array(m, dtype=np.int64)
    unit_cluster = np.repeat(np.arange(block.size), m)
    u = rng.standard_normal(unit_cluster.size)
    totals = np.bincount(unit_cluster, weights=u, minlength=block.size)
    if standardize:
        shift = totals.mean() / m
        scale = totals.std(ddof=1)
        u = (u - shift[unit_cluster]) / scale
    z = _fixed_assignment(rng, block, lambda size, it=iter(nts): next(it))
    return _assemble(block, z, m, u[:, None], unit_cluster, ("x",))
