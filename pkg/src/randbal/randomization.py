"""Assignment enumeration and sampling.

Random draws are counter-based: replicate ``r`` of a run with seed ``s``
reads a fixed window of a Philox stream keyed by ``s``, so a replicate's
assignment does not depend on how replicates are chunked or on how many
workers run them.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations
from typing import Callable, Iterator, NamedTuple

import numpy as np

from . import kernels
from .data import BalanceError, Design

MASK64 = (1 << 64) - 1

# Philox key words separating independent uses of one master seed.
STREAM_UNIFORM = 1
STREAM_BIASED = 2
STREAM_CONTROL = 3

DEFAULT_ENUMERATION_CAP = 10**7
EXACT_BIAS_LIMIT = 10**4


class SpaceTooLargeError(BalanceError):
    """The randomization space is too large to enumerate."""


@dataclass(frozen=True)
class SeedSpec:
    """Master seed plus the rule mapping replicate index to substream."""

    seed: int

    def __post_init__(self):
        if not isinstance(self.seed, (int, np.integer)) or not 0 <= self.seed <= MASK64:
            raise BalanceError(f"seed must be an integer in [0, 2**64), got {self.seed!r}")

    def uniforms(self, start: int, count: int, width: int, stream: int = STREAM_UNIFORM) -> np.ndarray:
        """Uniform draws on [0, 1) for replicates ``start .. start+count-1``.

        Row ``i`` depends only on (seed, stream, start + i, width).
        """
        words = -(-max(width, 1) // 4) * 4
        counter = start * (words // 4)
        bg = np.random.Philox(key=[int(self.seed), stream],
                              counter=[counter & MASK64, counter >> 64, 0, 0])
        raw = bg.random_raw(count * words).reshape(count, words)[:, :width]
        return (raw >> np.uint64(11)).astype(np.float64) * 2.0**-53


def _as_seed(seed) -> SeedSpec:
    return seed if isinstance(seed, SeedSpec) else SeedSpec(int(seed))


def worker_count(requested: int | None = None) -> int:
    """Number of workers, capped by the ``RANDBAL_THREADS`` environment variable."""
    n = requested or os.cpu_count() or 1
    cap = os.environ.get("RANDBAL_THREADS")
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError:
            pass
    return max(1, n)


def map_replicates(fn: Callable[[int, int], object], start: int, count: int,
                   chunk: int = 8192, workers: int | None = None) -> list:
    """Apply ``fn(chunk_start, chunk_count)`` over replicate chunks, in order."""
    bounds = [(s, min(chunk, start + count - s)) for s in range(start, start + count, chunk)]
    n = worker_count(workers)
    if n == 1 or len(bounds) == 1:
        return [fn(s, c) for s, c in bounds]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(lambda b: fn(*b), bounds))


# ---------------------------------------------------------------- counting


class SpaceCount(NamedTuple):
    exact: int | None
    log10: float

    @property
    def huge(self) -> bool:
        return self.exact is None


def count_space(design: Design) -> SpaceCount:
    """Size of the randomization space, or a 'huge' marker past 2**63 - 1."""
    log10 = float(sum(math.log10(math.comb(b.n, b.n_treated)) for b in design.blocks))
    total = 1
    for b in design.blocks:
        total *= math.comb(b.n, b.n_treated)
        if total > 2**63 - 1:
            return SpaceCount(None, log10)
    return SpaceCount(total, log10)


# ---------------------------------------------------------------- enumeration


@lru_cache(maxsize=256)
def _subset_table(n: int, k: int) -> np.ndarray:
    """All size-k subsets of range(n) in lexicographic order, shape (C(n,k), k)."""
    if k == 0:
        return np.zeros((1, 0), dtype=np.int64)
    flat = np.fromiter((i for c in combinations(range(n), k) for i in c), dtype=np.int64,
                       count=math.comb(n, k) * k)
    out = flat.reshape(-1, k)
    out.setflags(write=False)
    return out


def assignment_chunks(design: Design, chunk: int = 65536,
                      cap: int = DEFAULT_ENUMERATION_CAP) -> Iterator[np.ndarray]:
    """Enumerate the randomization space as int8 matrices of ``chunk`` rows.

    Order matches ``itertools.product`` over blocks of lexicographic
    subsets: the last block varies fastest.
    """
    space = count_space(design)
    if space.huge or space.exact > cap:
        raise SpaceTooLargeError(
            f"randomization space has about 10^{space.log10:.1f} assignments "
            f"(cap {cap}); use Monte Carlo mode"
        )
    tables = [_subset_table(b.n, b.n_treated) for b in design.blocks]
    radices = [t.shape[0] for t in tables]
    starts = design.starts
    n = design.n_clusters
    total = space.exact
    for lo in range(0, total, chunk):
        idx = np.arange(lo, min(lo + chunk, total), dtype=np.int64)
        Z = np.zeros((idx.size, n), dtype=np.int8)
        rows = np.arange(idx.size)[:, None]
        rem = idx
        for b in range(design.B - 1, -1, -1):
            digit = rem % radices[b]
            rem = rem // radices[b]
            if tables[b].shape[1]:
                Z[rows, starts[b] + tables[b][digit]] = 1
        yield Z


def enumerate_assignments(design: Design, cap: int = DEFAULT_ENUMERATION_CAP) -> Iterator[np.ndarray]:
    """Yield every assignment in the randomization space exactly once."""
    for Z in assignment_chunks(design, cap=cap):
        yield from Z


# ---------------------------------------------------------------- uniform law


def _select_smallest(design: Design, keys: np.ndarray) -> np.ndarray:
    """Treat the ``n_treated`` clusters with the smallest keys in each block."""
    R, n = keys.shape
    bidx = design.block_index
    order = np.argsort(keys + bidx[None, :], axis=1, kind="stable")
    treat_pos = (np.arange(n) - design.starts[bidx]) < design.n_treated[bidx]
    Z = np.zeros((R, n), dtype=np.int8)
    np.put_along_axis(Z, order, np.broadcast_to(treat_pos.astype(np.int8), (R, n)), axis=1)
    return Z


def sample_uniform_batch(design: Design, seed, start: int, count: int) -> np.ndarray:
    """Replicates ``start .. start+count-1`` of uniform assignment, one per row."""
    keys = _as_seed(seed).uniforms(start, count, design.n_clusters, STREAM_UNIFORM)
    return _select_smallest(design, keys)


def sample_uniform(design: Design, seed, replicate: int) -> np.ndarray:
    """Simple random sampling of ``n_treated`` clusters within every block."""
    return sample_uniform_batch(design, seed, replicate, 1)[0]


# ---------------------------------------------------------------- biased law


@dataclass(frozen=True)
class BiasModel:
    """Logistic selection bias: P(z) within a block is proportional to
    exp(sum of psi over treated clusters).

    With ``psi`` unset the bias is linear, ``beta * x``. Block intercepts
    cancel once treated counts are fixed, so they never appear.
    """

    beta: float = 0.0
    psi: Callable[[np.ndarray], np.ndarray] | None = None
    covariate: int = 0

    def scores(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[:, self.covariate]
        out = np.asarray(self.psi(x) if self.psi is not None else self.beta * x, dtype=np.float64)
        if out.shape != x.shape or not np.all(np.isfinite(out)):
            raise BalanceError("bias function produced non-finite or misshapen scores")
        return np.ascontiguousarray(out)


@dataclass(frozen=True, eq=False)
class _BiasPlan:
    width: int
    exact_groups: list           # (n, block starts, subset table, cumulative probs, u columns)
    chain_starts: np.ndarray
    chain_sizes: np.ndarray
    chain_steps: np.ndarray
    chain_offsets: np.ndarray


def _bias_plan(design: Design, psi: np.ndarray, burn_in: int | None) -> _BiasPlan:
    col = design.n_clusters
    groups: dict[tuple[int, int], list[int]] = {}
    chain = []
    for b, blk in enumerate(design.blocks):
        if math.comb(blk.n, blk.n_treated) <= EXACT_BIAS_LIMIT:
            groups.setdefault((blk.n, blk.n_treated), []).append(b)
        else:
            chain.append(b)
    starts = design.starts
    exact = []
    for (n, k), members in groups.items():
        table = _subset_table(n, k)
        members = np.array(members)
        pos = starts[members][:, None] + np.arange(n)[None, :]
        member_psi = psi[pos]                                      # (G, n)
        logw = member_psi[:, table].sum(axis=2)                    # (G, S)
        logw -= logw.max(axis=1, keepdims=True)
        w = np.exp(logw)
        cum = np.cumsum(w, axis=1)
        cum /= cum[:, -1:]
        exact.append((n, starts[members], table, cum, np.arange(col, col + members.size)))
        col += members.size
    sizes = np.array([design.blocks[b].n for b in chain], dtype=np.int64)
    steps = sizes * 50 if burn_in is None else np.full(len(chain), int(burn_in), dtype=np.int64)
    offsets = col + np.concatenate([[0], np.cumsum(3 * steps)[:-1]]).astype(np.int64) \
        if chain else np.zeros(0, dtype=np.int64)
    width = col + int(3 * steps.sum())
    return _BiasPlan(width, exact, starts[chain].astype(np.int64), sizes, steps.astype(np.int64),
                     offsets)


def _draw_exact(Z: np.ndarray, U: np.ndarray, group) -> None:
    n, block_starts, table, cum, ucol = group
    R = Z.shape[0]
    G, S = cum.shape
    u = U[:, ucol]                                                 # (R, G)
    if S <= 256:
        step = max(1, 4_000_000 // max(G * S, 1))
        idx = np.empty((R, G), dtype=np.int64)
        for lo in range(0, R, step):
            idx[lo:lo + step] = (cum[None, :, :] <= u[lo:lo + step, :, None]).sum(axis=2)
    else:
        idx = np.column_stack([np.searchsorted(cum[g], u[:, g], side="right") for g in range(G)])
    np.minimum(idx, S - 1, out=idx)
    rows = np.arange(R)[:, None, None]
    Z[rows, block_starts[None, :, None] + np.arange(n)[None, None, :]] = 0
    Z[rows, block_starts[None, :, None] + table[idx]] = 1


def sample_biased_batch(design: Design, x, bias: BiasModel, seed, start: int, count: int,
                        burn_in: int | None = None) -> np.ndarray:
    """Replicates of assignment under selection bias, one per row.

    Blocks with at most 10**4 possible subsets are sampled exactly from
    their enumerated law. Larger blocks run a swap-Metropolis chain started
    from a uniform draw, ``burn_in`` proposals long (default 50 per cluster).
    """
    psi = bias.scores(x)
    if psi.shape != (design.n_clusters,):
        raise BalanceError("covariate length does not match design")
    plan = _bias_plan(design, psi, burn_in)
    U = _as_seed(seed).uniforms(start, count, plan.width, STREAM_BIASED)
    Z = _select_smallest(design, U[:, :design.n_clusters])
    for group in plan.exact_groups:
        _draw_exact(Z, U, group)
    if plan.chain_starts.size:
        kernels.swap_chains(Z, psi, plan.chain_starts, plan.chain_sizes, plan.chain_steps,
                            plan.chain_offsets, np.ascontiguousarray(U))
    return Z


def sample_biased(design: Design, x, bias: BiasModel, seed, replicate: int,
                  burn_in: int | None = None) -> np.ndarray:
    return sample_biased_batch(design, x, bias, seed, replicate, 1, burn_in)[0]
