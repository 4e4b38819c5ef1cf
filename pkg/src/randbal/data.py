"""Study data: unit and cluster records, designs, covariate matrices.

Everything downstream works on cluster totals. Units (patients, voters)
are summed into the clusters (clinics, households) that were randomized,
and clusters are grouped into blocks within which a fixed number was
assigned to treatment.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np


class BalanceError(ValueError):
    """Base class for errors raised by randbal."""


class InputError(BalanceError):
    """Malformed or inconsistent input data."""


class DegenerateDesignError(BalanceError):
    """The design leaves nothing to analyze."""


class DegenerateBlockWarning(UserWarning):
    """A block with all or none of its clusters treated was dropped."""


@dataclass(frozen=True)
class UnitRecord:
    cluster_id: Any
    block_id: Any
    assigned: int
    covariates: tuple[float, ...]


@dataclass(frozen=True)
class ClusterRecord:
    cluster_id: Any
    block_id: Any
    z: int
    m: int
    x: tuple[float, ...] = ()


@dataclass(frozen=True)
class Block:
    block_id: Any
    cluster_ids: tuple
    n: int
    n_treated: int
    m_bar: float

    @property
    def h(self) -> float:
        """Half the harmonic mean of the treated and control counts."""
        return self.n_treated * (1.0 - self.n_treated / self.n)


@dataclass(frozen=True, eq=False)
class UnitLevel:
    """Unit-level covariates kept alongside cluster totals.

    Rows are in canonical order (by cluster row, then by value) so that the
    aggregation does not depend on the order units were supplied in.
    """

    names: tuple[str, ...]
    values: np.ndarray
    cluster_row: np.ndarray


@dataclass(frozen=True, eq=False)
class CovariateMatrix:
    names: tuple[str, ...]
    values: np.ndarray
    cluster_ids: tuple
    units: UnitLevel | None = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            values = values.reshape(len(self.cluster_ids), -1)
        object.__setattr__(self, "values", values)
        if values.shape != (len(self.cluster_ids), len(self.names)):
            raise InputError(
                f"covariate matrix has shape {values.shape}, expected "
                f"({len(self.cluster_ids)}, {len(self.names)})"
            )
        if not np.all(np.isfinite(values)):
            raise InputError("covariate matrix contains non-finite values")

    @property
    def k(self) -> int:
        return len(self.names)

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]

    def select(self, names: Sequence[str]) -> "CovariateMatrix":
        missing = [n for n in names if n not in self.names]
        if missing:
            raise InputError(f"unknown covariate(s): {', '.join(missing)}")
        idx = [self.names.index(n) for n in names]
        units = self.units
        if units is not None and all(n in units.names for n in names):
            uidx = [units.names.index(n) for n in names]
            units = UnitLevel(tuple(names), units.values[:, uidx], units.cluster_row)
        return CovariateMatrix(tuple(names), self.values[:, idx], self.cluster_ids, units)

    def with_column(self, name: str, values, first: bool = False) -> "CovariateMatrix":
        col = np.asarray(values, dtype=np.float64).reshape(-1, 1)
        if first:
            return CovariateMatrix((name,) + self.names, np.hstack([col, self.values]),
                                   self.cluster_ids, self.units)
        return CovariateMatrix(self.names + (name,), np.hstack([self.values, col]),
                               self.cluster_ids, self.units)


@dataclass(frozen=True, eq=False)
class Design:
    """Blocks of clusters with fixed treated counts.

    Only analyzable blocks (0 < n_treated < n) are kept; the clusters of
    those blocks, in (block_id, cluster_id) order, define the row order of
    every vector and matrix passed to the analysis functions.
    """

    blocks: tuple[Block, ...]
    m: np.ndarray
    z: np.ndarray
    excluded: tuple[dict, ...] = ()
    count_source: str = "observed"
    _sizes: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "m", np.asarray(self.m, dtype=np.float64))
        object.__setattr__(self, "z", np.asarray(self.z, dtype=np.int8))
        object.__setattr__(self, "_sizes", np.array([b.n for b in self.blocks], dtype=np.int64))

    @property
    def B(self) -> int:
        return len(self.blocks)

    @property
    def n_clusters(self) -> int:
        return int(self._sizes.sum())

    @property
    def cluster_ids(self) -> tuple:
        return tuple(c for b in self.blocks for c in b.cluster_ids)

    @property
    def sizes(self) -> np.ndarray:
        return self._sizes

    @property
    def starts(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self._sizes)[:-1]]).astype(np.int64)

    @property
    def n_treated(self) -> np.ndarray:
        return np.array([b.n_treated for b in self.blocks], dtype=np.int64)

    @property
    def m_bar(self) -> np.ndarray:
        return np.array([b.m_bar for b in self.blocks])

    @property
    def h(self) -> np.ndarray:
        return np.array([b.h for b in self.blocks])

    @property
    def block_index(self) -> np.ndarray:
        """Block position of every cluster."""
        return np.repeat(np.arange(self.B), self._sizes)

    def align(self, X: CovariateMatrix) -> np.ndarray:
        """Rows of ``X`` for the analyzed clusters, in design order."""
        pos = {cid: i for i, cid in enumerate(X.cluster_ids)}
        try:
            rows = [pos[c] for c in self.cluster_ids]
        except KeyError as exc:
            raise InputError(f"cluster {exc.args[0]!r} missing from covariate matrix") from None
        return X.values[rows]

    def with_assignment(self, z) -> "Design":
        """Same blocks, different observed assignment (counts must agree)."""
        z = np.asarray(z, dtype=np.int8)
        check_assignment(self, z)
        return Design(self.blocks, self.m, z, self.excluded, self.count_source)

    def summary(self) -> dict:
        return {
            "B": self.B,
            "n_clusters": self.n_clusters,
            "count_source": self.count_source,
            "blocks": [
                {"block_id": str(b.block_id), "n": b.n, "n_treated": b.n_treated,
                 "m_bar": b.m_bar, "h": b.h}
                for b in self.blocks
            ],
            "excluded": list(self.excluded),
        }


def check_assignment(design: Design, z) -> np.ndarray:
    """Validate that ``z`` is a binary vector honoring every block count."""
    z = np.asarray(z)
    if z.shape != (design.n_clusters,):
        raise InputError(f"assignment has length {z.size}, design has {design.n_clusters} clusters")
    if not np.all((z == 0) | (z == 1)):
        raise InputError("assignment must be binary")
    counts = np.add.reduceat(z.astype(np.int64), design.starts) if design.B else np.array([])
    bad = np.nonzero(counts != design.n_treated)[0]
    if bad.size:
        b = design.blocks[bad[0]]
        raise InputError(
            f"assignment treats {counts[bad[0]]} clusters in block {b.block_id!r}, "
            f"design fixes {b.n_treated}"
        )
    return z


def _ordered(clusters):
    return sorted(clusters, key=lambda c: (c.block_id, c.cluster_id))


def aggregate_units(units: Sequence[UnitRecord], covariate_names: Sequence[str]):
    """Sum unit covariates into cluster totals.

    Returns ``(clusters, X)`` where ``clusters`` is a list of
    :class:`ClusterRecord` sorted by (block_id, cluster_id) and ``X`` holds
    the same totals with the unit-level data attached (needed by
    :func:`interaction_expand`).
    """
    names = tuple(covariate_names)
    k = len(names)
    info: dict[Any, tuple[Any, int]] = {}
    members: dict[Any, list[int]] = {}
    rows = np.empty((len(units), k))
    for u_idx, u in enumerate(units):
        if len(u.covariates) != k:
            raise InputError(
                f"unit {u_idx} (cluster {u.cluster_id!r}) has {len(u.covariates)} "
                f"covariate values, expected {k}"
            )
        for j, v in enumerate(u.covariates):
            if v is None or not math.isfinite(float(v)):
                raise InputError(
                    f"unit {u_idx} (cluster {u.cluster_id!r}) is missing covariate {names[j]!r}"
                )
            rows[u_idx, j] = float(v)
        if u.assigned not in (0, 1):
            raise InputError(f"unit {u_idx} has non-binary assignment {u.assigned!r}")
        prev = info.setdefault(u.cluster_id, (u.block_id, u.assigned))
        if prev[0] != u.block_id:
            raise InputError(
                f"cluster {u.cluster_id!r} spans blocks {prev[0]!r} and {u.block_id!r}"
            )
        if prev[1] != u.assigned:
            raise InputError(f"cluster {u.cluster_id!r} has units with different assignments")
        members.setdefault(u.cluster_id, []).append(u_idx)
    if not info:
        raise InputError("no units supplied")

    order = sorted(info, key=lambda c: (info[c][0], c))
    row_of = {c: i for i, c in enumerate(order)}
    cluster_row = np.array([row_of[u.cluster_id] for u in units], dtype=np.int64)
    # canonical unit order: by cluster, then by covariate values
    perm = np.lexsort(tuple(rows[:, j] for j in range(k - 1, -1, -1)) + (cluster_row,))
    rows = rows[perm]
    cluster_row = cluster_row[perm]
    totals = _cluster_sums(rows, cluster_row, len(order))
    sizes = np.bincount(cluster_row, minlength=len(order))

    clusters = [
        ClusterRecord(c, info[c][0], int(info[c][1]), int(sizes[i]), tuple(totals[i]))
        for i, c in enumerate(order)
    ]
    X = CovariateMatrix(names, totals, tuple(order), UnitLevel(names, rows, cluster_row))
    return clusters, X


def _cluster_sums(values: np.ndarray, cluster_row: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((n, values.shape[1]))
    if values.shape[0] == 0 or values.shape[1] == 0:
        return out
    starts = np.concatenate([[0], np.nonzero(np.diff(cluster_row))[0] + 1])
    out[cluster_row[starts]] = np.add.reduceat(values, starts, axis=0)
    return out


def build_design(clusters: Sequence[ClusterRecord], count_source: str = "observed") -> Design:
    """Group clusters into blocks, fixing each block's treated count.

    Blocks in which every cluster, or none, was treated carry no
    information about balance; they are dropped with a
    :class:`DegenerateBlockWarning` and listed in ``Design.excluded``.
    """
    if not clusters:
        raise InputError("no clusters supplied")
    seen = set()
    for c in clusters:
        if c.cluster_id in seen:
            raise InputError(f"duplicate cluster id {c.cluster_id!r}")
        seen.add(c.cluster_id)
        if c.z not in (0, 1):
            raise InputError(f"cluster {c.cluster_id!r} has non-binary assignment {c.z!r}")
        if not (isinstance(c.m, (int, np.integer)) and c.m >= 1):
            raise InputError(f"cluster {c.cluster_id!r} has invalid size {c.m!r}")

    grouped: dict[Any, list[ClusterRecord]] = {}
    for c in _ordered(clusters):
        grouped.setdefault(c.block_id, []).append(c)

    blocks, excluded, m, z = [], [], [], []
    for block_id, members in grouped.items():
        n = len(members)
        nt = sum(c.z for c in members)
        if nt == 0 or nt == n:
            record = {"block_id": str(block_id), "n": n, "n_treated": nt,
                      "reason": "all clusters in one arm"}
            excluded.append(record)
            warnings.warn(
                f"block {block_id!r} excluded: {nt} of {n} clusters treated",
                DegenerateBlockWarning, stacklevel=2,
            )
            continue
        sizes = [c.m for c in members]
        blocks.append(Block(block_id, tuple(c.cluster_id for c in members), n, nt,
                            float(np.mean(sizes))))
        m.extend(sizes)
        z.extend(c.z for c in members)
    if not blocks:
        raise DegenerateDesignError("no analyzable blocks")
    return Design(tuple(blocks), np.array(m), np.array(z), tuple(excluded), count_source)


def interaction_expand(X: CovariateMatrix) -> CovariateMatrix:
    """Append all pairwise products (squares included) of the covariates.

    Products are formed unit by unit and then summed to cluster totals, so
    unit-level data must be attached to ``X``.
    """
    if X.units is None:
        raise InputError(
            "interactions need unit-level data: products of cluster totals are not "
            "totals of unit products; supply a unit file"
        )
    u = X.units
    k = len(u.names)
    pairs = [(i, j) for i in range(k) for j in range(i, k)]
    prods = np.column_stack([u.values[:, i] * u.values[:, j] for i, j in pairs]) \
        if pairs else np.empty((u.values.shape[0], 0))
    names = tuple(f"{u.names[i]}*{u.names[j]}" for i, j in pairs)
    totals = _cluster_sums(prods, u.cluster_row, len(X.cluster_ids))
    new_units = UnitLevel(u.names + names, np.hstack([u.values, prods]), u.cluster_row)
    return CovariateMatrix(X.names + names, np.hstack([X.values, totals]), X.cluster_ids,
                           new_units)


# ---------------------------------------------------------------- CSV input

UNIT_KEYS = ("cluster_id", "block_id", "z")
CLUSTER_KEYS = ("cluster_id", "block_id", "z", "m")


def _read_rows(path):
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise InputError(f"{path}: empty file")
            header = [h.strip() for h in header]
            rows = [(reader.line_num, r) for r in reader if any(cell.strip() for cell in r)]
    except OSError as exc:
        raise InputError(f"{path}: {exc.strerror}") from None
    except UnicodeDecodeError:
        raise InputError(f"{path}: not valid UTF-8") from None
    except csv.Error as exc:
        raise InputError(f"{path}: {exc}") from None
    return header, rows


def _covariate_columns(header, required, covariates, path):
    missing = [c for c in required if c not in header]
    if missing:
        raise InputError(f"{path}: missing required column(s) {', '.join(missing)}")
    if len(set(header)) != len(header):
        raise InputError(f"{path}: duplicate column names in header")
    available = [h for h in header if h not in required]
    if covariates is None:
        return available
    unknown = [c for c in covariates if c not in available]
    if unknown:
        raise InputError(f"{path}: unknown covariate column(s) {', '.join(unknown)}")
    return list(covariates)


def _parse_float(cell, line, col, path):
    s = cell.strip()
    if s == "" or s.upper() in ("NA", "NAN"):
        raise InputError(f"{path}: line {line}, column {col!r}: missing value")
    try:
        v = float(s)
    except ValueError:
        raise InputError(f"{path}: line {line}, column {col!r}: not a number: {s!r}") from None
    if not math.isfinite(v):
        raise InputError(f"{path}: line {line}, column {col!r}: non-finite value {s!r}")
    return v


def _parse_binary(cell, line, col, path):
    s = cell.strip()
    if s not in ("0", "1"):
        raise InputError(f"{path}: line {line}, column {col!r}: expected 0 or 1, got {s!r}")
    return int(s)


def read_unit_csv(path, covariates: Sequence[str] | None = None):
    """Read a unit-level file and aggregate it to clusters.

    Columns ``cluster_id``, ``block_id`` and ``z`` are required; all other
    columns (or the subset named in ``covariates``) are covariates.
    """
    header, rows = _read_rows(path)
    names = _covariate_columns(header, UNIT_KEYS, covariates, path)
    col = {h: i for i, h in enumerate(header)}
    units = []
    for line, r in rows:
        if len(r) != len(header):
            raise InputError(f"{path}: line {line}: expected {len(header)} fields, got {len(r)}")
        units.append(UnitRecord(
            r[col["cluster_id"]].strip(),
            r[col["block_id"]].strip(),
            _parse_binary(r[col["z"]], line, "z", path),
            tuple(_parse_float(r[col[n]], line, n, path) for n in names),
        ))
    return aggregate_units(units, names)


def read_cluster_csv(path, covariates: Sequence[str] | None = None):
    """Read a cluster-level file of covariate totals.

    Columns ``cluster_id``, ``block_id``, ``z`` and ``m`` are required.
    Returns ``(clusters, X)`` with clusters sorted by (block_id, cluster_id).
    """
    header, rows = _read_rows(path)
    names = _covariate_columns(header, CLUSTER_KEYS, covariates, path)
    col = {h: i for i, h in enumerate(header)}
    clusters = []
    for line, r in rows:
        if len(r) != len(header):
            raise InputError(f"{path}: line {line}: expected {len(header)} fields, got {len(r)}")
        m = _parse_float(r[col["m"]], line, "m", path)
        if m < 1 or m != int(m):
            raise InputError(f"{path}: line {line}, column 'm': size must be a positive integer")
        clusters.append(ClusterRecord(
            r[col["cluster_id"]].strip(),
            r[col["block_id"]].strip(),
            _parse_binary(r[col["z"]], line, "z", path),
            int(m),
            tuple(_parse_float(r[col[n]], line, n, path) for n in names),
        ))
    if not clusters:
        raise InputError(f"{path}: no data rows")
    clusters = _ordered(clusters)
    X = CovariateMatrix(tuple(names), np.array([c.x for c in clusters]).reshape(len(clusters), -1),
                        tuple(c.cluster_id for c in clusters))
    return clusters, X


def clusters_from_arrays(block, z, m, x=None, names=None):
    """Build cluster records and a covariate matrix from parallel arrays.

    Cluster ids are zero-padded positions, so design order equals the
    order of the arrays when blocks are already sorted.
    """
    n = len(z)
    width = len(str(max(n - 1, 0)))
    x = np.zeros((n, 0)) if x is None else np.asarray(x, dtype=np.float64).reshape(n, -1)
    names = tuple(names) if names is not None else tuple(f"x{j + 1}" for j in range(x.shape[1]))
    ids = [f"c{i:0{width}d}" for i in range(n)]
    bw = len(str(max(block))) if n else 1
    clusters = [
        ClusterRecord(ids[i], f"b{int(block[i]):0{bw}d}" if isinstance(block[i], (int, np.integer))
                      else block[i], int(z[i]), int(m[i]), tuple(x[i]))
        for i in range(n)
    ]
    return clusters, CovariateMatrix(names, x, tuple(ids))


def design_from_arrays(block, z, m, x=None, names=None):
    """Design and aligned covariate rows from parallel arrays.

    Returns ``(design, X)`` with ``X`` an ``(n, k)`` array in design order.
    """
    clusters, X = clusters_from_arrays(block, z, m, x, names)
    design = build_design(clusters)
    return design, design.align(X)
