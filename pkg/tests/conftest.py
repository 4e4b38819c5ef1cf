import itertools
import math

import numpy as np
import pytest

from randbal.data import design_from_arrays


ACCEPTANCE_LINES = []


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running simulation test")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def brute_d(block, z, m, x, weights="harmonic"):
    """Adjusted difference straight from its definition, one block at a time."""
    block, z, m, x = map(np.asarray, (block, z, m, x))
    parts, raw = [], []
    for b in sorted(set(block.tolist())):
        idx = block == b
        n, nt = idx.sum(), z[idx].sum()
        mbar = m[idx].mean()
        h = nt * (1 - nt / n)
        diff = (z[idx] * x[idx]).sum() / (mbar * nt) - ((1 - z[idx]) * x[idx]).sum() / (mbar * (n - nt))
        parts.append(diff)
        raw.append({"harmonic": h * mbar, "equal": 1.0, "block-size": n * mbar}[weights])
    w = np.array(raw) / sum(raw)
    return float(np.dot(w, parts))


def all_assignments(block, n_treated):
    """Every assignment with the given per-block treated counts (itertools oracle)."""
    block = np.asarray(block)
    labels = sorted(set(block.tolist()))
    per_block = []
    for b in labels:
        idx = np.nonzero(block == b)[0]
        per_block.append([set(c) for c in itertools.combinations(idx.tolist(), n_treated[b])])
    for combo in itertools.product(*per_block):
        z = np.zeros(block.size, dtype=np.int8)
        for s in combo:
            z[list(s)] = 1
        yield z


def random_small_design(rng, k=2, max_clusters=12, max_blocks=3):
    """Random enumerable design with mixed cluster sizes."""
    while True:
        B = int(rng.integers(1, max_blocks + 1))
        sizes = rng.integers(2, 6, size=B)
        if sizes.sum() <= max_clusters:
            break
    block = np.repeat(np.arange(B), sizes)
    z = np.zeros(block.size, dtype=np.int8)
    for b, n in enumerate(sizes):
        nt = int(rng.integers(1, n))
        idx = np.nonzero(block == b)[0]
        z[rng.choice(idx, nt, replace=False)] = 1
    m = rng.integers(1, 8, size=block.size)
    x = rng.normal(size=(block.size, k)) * m[:, None] + rng.integers(0, 3, size=(block.size, k))
    design, X = design_from_arrays(block, z, m, x)
    return design, X, (block, z, m, x)


@pytest.fixture
def d1():
    """One block of four unit clusters, x = 1..4, first two treated."""
    return design_from_arrays([0] * 4, [1, 1, 0, 0], [1, 1, 1, 1], [1, 2, 3, 4])


@pytest.fixture
def d2():
    """One block with sizes (1, 2, 1, 2)."""
    return design_from_arrays([0] * 4, [1, 0, 1, 0], [1, 2, 1, 2], [0, 2, 1, 1])


@pytest.fixture
def d3():
    """Two blocks, (n, n_t, m_bar) = (4, 2, 1) and (3, 1, 2)."""
    return design_from_arrays([0, 0, 0, 0, 1, 1, 1], [1, 1, 0, 0, 1, 0, 0],
                              [1, 1, 1, 1, 2, 2, 2], [1, 5, 2, 3, 4, 7, 1])


def normal_sf_oracle(z):
    import mpmath

    mpmath.mp.dps = 40
    return float(mpmath.quad(lambda t: mpmath.exp(-t * t / 2), [z, mpmath.inf]) / mpmath.sqrt(2 * mpmath.pi))


def chi2_sf_oracle(x, df):
    import mpmath

    mpmath.mp.dps = 40
    k = mpmath.mpf(df) / 2
    dens = lambda t: t ** (k - 1) * mpmath.exp(-t / 2) / (2**k * mpmath.gamma(k))
    return float(1 - mpmath.quad(dens, [0, x])) if x < df else float(mpmath.quad(dens, [x, mpmath.inf]))


def comb(n, k):
    return math.comb(n, k)
