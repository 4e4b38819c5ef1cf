"""Comparing candidate stratifications before randomizing.

The randomization variance of ``d`` depends only on the design, so
candidate blockings can be ranked by how tightly they would hold each
covariate's imbalance. The yardstick is the s.d. of ``d`` expressed as a
fraction of the s.d. of ``x / m_bar`` over clusters, one yardstick shared
by all candidates.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from ..balance import variance_d
from ..data import (
    BalanceError,
    Block,
    DegenerateBlockWarning,
    DegenerateDesignError,
    Design,
    InputError,
)


def treated_count(n: int, fraction: float) -> int:
    """Treated clusters in a block of ``n``: ``n * fraction`` rounded half up, kept in [1, n - 1]."""
    return int(min(max(math.floor(n * fraction + 0.5), 1), n - 1))


def stratified_design(labels: Sequence, m, fraction: float | None = None,
                      n_treated: Mapping | None = None, cluster_ids: Sequence | None = None
                      ) -> tuple[Design, np.ndarray]:
    """Hypothetical design that blocks clusters by ``labels``.

    Treated counts come from ``n_treated`` (block label to count) or from
    ``fraction`` via :func:`treated_count`. Singleton blocks cannot be
    randomized and are excluded with a warning. The design's assignment is
    a placeholder (the first clusters of each block treated); only the
    randomization law matters here.
    """
    labels = list(labels)
    m = np.asarray(m)
    n = len(labels)
    if m.shape != (n,):
        raise InputError("labels and sizes must have one entry per cluster")
    if cluster_ids is None:
        cluster_ids = tuple(range(n))
    if (fraction is None) == (n_treated is None):
        raise BalanceError("give exactly one of fraction and n_treated")
    groups: dict = {}
    for i, lab in enumerate(labels):
        groups.setdefault(lab, []).append(i)
    blocks, excluded, rows = [], [], []
    for lab in sorted(groups, key=lambda v: (str(type(v)), v)):
        idx = groups[lab]
        size = len(idx)
        if size < 2:
            excluded.append({"block_id": str(lab), "n": size, "n_treated": 0,
                             "reason": "single cluster"})
            warnings.warn(f"candidate block {lab!r} has one cluster and is excluded",
                          DegenerateBlockWarning, stacklevel=2)
            continue
        nt = treated_count(size, fraction) if n_treated is None else int(n_treated[lab])
        if not 1 <= nt < size:
            raise BalanceError(f"block {lab!r}: treated count {nt} not in [1, {size - 1}]")
        blocks.append(Block(lab, tuple(cluster_ids[i] for i in idx), size, nt,
                            float(m[idx].mean())))
        rows.extend(idx)
    if not blocks:
        raise DegenerateDesignError("no analyzable blocks")
    z = np.concatenate([[1] * b.n_treated + [0] * (b.n - b.n_treated) for b in blocks])
    design = Design(tuple(blocks), m[rows], z, tuple(excluded), "fraction" if n_treated is None else "given")
    return design, np.array(rows)


def balance_ratio(design: Design, x, rows=None, denominator: float | None = None) -> float:
    """s.d. of ``d(Z, x)`` under harmonic weights as a fraction of an s.d. of ``x / m_bar``.

    By default the yardstick is the s.d. (``ddof = 1``) over the design's
    clusters of ``x_i / m_bar``, with ``m_bar`` the mean cluster size over
    all of them. It does not depend on the blocking, so ratios of
    different candidates are on one scale. For a single block it equals
    the s.d. of ``x_i / m_bar_b``.

    Parameters
    ----------
    design : Design
    x : array_like
        Cluster totals in design order, or in the original order when
        ``rows`` (as returned by :func:`stratified_design`) is given.
    denominator : float, optional
        Precomputed yardstick, so that candidates excluding different
        clusters still share one scale.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    if rows is not None:
        x = x[rows]
    if x.shape != (design.n_clusters,):
        raise InputError("covariate length does not match design")
    if denominator is None:
        denominator = (x / design.m.mean()).std(ddof=1)
    if not denominator > 0:
        raise BalanceError("x / m_bar is constant: ratio undefined")
    return math.sqrt(max(variance_d(design, x, "harmonic"), 0.0)) / denominator


@dataclass(frozen=True)
class StratificationTable:
    candidates: tuple[str, ...]
    covariates: tuple[str, ...]
    ratios: np.ndarray
    excluded: dict

    def rows(self):
        for name, r in zip(self.candidates, self.ratios):
            yield [name] + list(r)


def compare_stratifications(candidates: Mapping[str, Sequence], m, X, names: Sequence[str] | None = None,
                            fraction: float | None = None, n_treated_total: int | None = None
                            ) -> StratificationTable:
    """Balance ratios for every (candidate, covariate) pair.

    ``candidates`` maps a name to a block label per cluster; ``X`` holds
    cluster totals (clusters by covariates) in the same order. The treated
    fraction defaults to ``n_treated_total / n``. Rows are reported in the
    order given; no candidate is chosen.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0]
    names = tuple(names) if names is not None else tuple(f"x{j + 1}" for j in range(X.shape[1]))
    if fraction is None:
        if n_treated_total is None:
            raise BalanceError("give the treated fraction or total")
        fraction = n_treated_total / n
    m = np.asarray(m, dtype=np.float64)
    scale = (X / m.mean()).std(axis=0, ddof=1) if n > 1 else np.zeros(X.shape[1])
    out = np.empty((len(candidates), X.shape[1]))
    excluded = {}
    for i, (cname, labels) in enumerate(candidates.items()):
        if len(labels) != n:
            raise InputError(f"candidate {cname!r} labels {len(labels)} clusters, expected {n}")
        design, rows = stratified_design(labels, m, fraction)
        excluded[cname] = list(design.excluded)
        for j in range(X.shape[1]):
            out[i, j] = balance_ratio(design, X[:, j], rows, scale[j])
    return StratificationTable(tuple(candidates), names, out, excluded)
