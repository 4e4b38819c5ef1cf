import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from randbal.balance import Contrast, variance_d
from randbal.data import BalanceError, DegenerateBlockWarning
from randbal.experiments import synthetic
from randbal.experiments.design_eval import (
    balance_ratio,
    compare_stratifications,
    stratified_design,
    treated_count,
)
from randbal.experiments.power import (
    PowerStudySpec,
    noncentrality,
    run_power_study,
    s2_blocks,
    theoretical_power,
)
from randbal.experiments.size import SizeStudySpec, run_size_study
from randbal.randomization import sample_uniform_batch


def test_clinics_shape():
    s = synthetic.clinics(seed=4)
    assert s.design.n_clusters == 21 and s.design.B == 1
    assert int(s.design.z.sum()) == 14
    assert s.X.names == synthetic.CLINIC_NAMES
    # totals are counts bounded by cluster size
    v = s.values
    assert np.all(v >= 0) and np.all(v <= s.design.m[:, None])
    assert np.allclose(v, np.rint(v))


def test_households_shape():
    s = synthetic.households(seed=2)
    assert s.design.n_clusters == 100
    assert s.values.shape == (100, 38)
    assert set(np.unique(s.design.m)) <= {1.0, 2.0}
    assert int(s.design.z.sum()) == 22
    # each voter sits in exactly one ward
    assert np.allclose(s.values[:, 9:].sum(axis=1), s.design.m)


def test_age_basis_columns_bounded():
    age = np.linspace(20, 80, 200)
    full = synthetic.age_basis(age)
    assert full.shape == (200, 6)
    assert np.all(full >= 0) and np.all(full.sum(axis=1) <= 1 + 1e-12)


def test_block_mixture_standardized():
    s = synthetic.block_mixture([{"n": 2, "n_treated": 1, "m": 3, "count": 50}], seed=1)
    x = s.values[:, 0]
    assert x.mean() == pytest.approx(0, abs=1e-12)
    assert x.std(ddof=1) == pytest.approx(1, rel=1e-12)


def test_generators_are_seeded():
    a, b = synthetic.clinics(seed=9), synthetic.clinics(seed=9)
    assert np.array_equal(a.values, b.values) and np.array_equal(a.design.z, b.design.z)


@pytest.mark.parametrize("n, f, want", [(21, 2 / 3, 14), (5, 0.5, 3), (4, 0.5, 2), (3, 0.01, 1), (3, 0.99, 2)])
def test_treated_count(n, f, want):
    assert treated_count(n, f) == want


def test_stratified_design_singletons_excluded():
    with pytest.warns(DegenerateBlockWarning):
        design, rows = stratified_design(["a", "a", "b", "c", "c", "c"], np.ones(6), fraction=0.5)
    assert design.B == 2 and sorted(rows.tolist()) == [0, 1, 3, 4, 5]
    assert design.count_source == "fraction"
    with pytest.raises(BalanceError):
        stratified_design(["a", "a"], np.ones(2))


def test_unstratified_ratio_closed_form():
    s = synthetic.clinics(seed=0)
    design, rows = stratified_design(["all"] * 21, s.design.m, n_treated={"all": 14})
    for j in range(4):
        r = balance_ratio(design, s.values[:, j], rows)
        assert r == pytest.approx(math.sqrt(3 / 14), rel=1e-12)


def test_blocking_on_size_beats_no_blocking():
    s = synthetic.clinics(seed=0)
    m = s.design.m
    by_size = np.argsort(np.argsort(m)) // 7
    table = compare_stratifications({"none": ["all"] * 21, "by_size": by_size.tolist()},
                                    m, s.values, s.X.names, n_treated_total=14)
    assert table.candidates == ("none", "by_size")
    assert np.allclose(table.ratios[0], math.sqrt(3 / 14))
    assert np.all(table.ratios[1] < table.ratios[0])


def test_size_study_small_and_deterministic(tmp_path):
    spec = SizeStudySpec({"name": "clinics", "seed": 0}, tests=("d2", "noclus", "uniform"),
                         reps=10_000, seed=7)
    a = run_size_study(spec, workers=1)
    b = run_size_study(spec, workers=4)
    for t in spec.tests:
        assert np.array_equal(a.pvalues[t], b.pvalues[t])
    u, se = a.size("uniform", 0.05)
    assert abs(u - 0.05) < 4 * se
    files = a.write(tmp_path)
    with open(files[0]) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 9 and rows[0]["test"] == "d2"


def test_size_spec_validation():
    with pytest.raises(BalanceError):
        SizeStudySpec({"name": "clinics"}, reps=100)
    with pytest.raises(BalanceError):
        SizeStudySpec({"name": "clinics"}, tests=("nope",))


def test_noncentrality_pairs_closed_form():
    s = synthetic.paired_blocks(200, seed=3)
    x = s.values[:, 0]
    d = s.design
    # pairs: h = 1/2, m_bar = 1, equal weights; s2_b = (x1 - x2)^2 / 2
    s2 = s2_blocks(d, x)
    pairs = x.reshape(-1, 2)
    assert np.allclose(s2, (pairs[:, 0] - pairs[:, 1]) ** 2 / 2)
    w = np.full(200, 1 / 200)
    want = 0.1 * (w * s2).sum() / math.sqrt((w**2 * s2 / 0.5).sum())
    assert noncentrality(d, x, 0.1) == pytest.approx(want, rel=1e-12)
    assert float(theoretical_power(0.0)) == pytest.approx(0.05, rel=1e-12)


def test_power_study_common_random_numbers(tmp_path):
    spec = PowerStudySpec(({"n": 2, "n_treated": 1, "m": 1, "count": 300},), beta=(0.0, 0.2),
                          weights=("harmonic", "equal"), reps=2000, seed=4)
    res = run_power_study(spec, workers=2)
    # with m and n constant every scheme gives the same weights and rejections
    assert res.get(0.2, "harmonic")["rejections"] == res.get(0.2, "equal")["rejections"]
    assert res.get(0.2, "harmonic")["power"] > res.get(0.0, "harmonic")["power"]
    assert res.write(tmp_path)[0].exists()


def test_identical_candidates_give_identical_rows():
    s = synthetic.clinics(seed=1)
    labels = (np.arange(21) % 3).tolist()
    t = compare_stratifications({"a": labels, "b": list(labels)}, s.design.m, s.values, n_treated_total=14)
    assert np.array_equal(t.ratios[0], t.ratios[1])


def test_ratio_zero_when_covariate_determined_by_block():
    labels = np.repeat([0, 1, 2], 4)
    x = np.array([3.0, 7.0, 5.0])[labels]
    design, rows = stratified_design(labels.tolist(), np.ones(12), fraction=0.5)
    assert balance_ratio(design, x, rows, denominator=1.0) == 0.0


def test_ratio_matches_simulated_variance():
    rng = np.random.default_rng(12)
    labels = np.repeat(["p", "q", "r"], [6, 9, 6])
    m = rng.integers(2, 30, size=21).astype(float)
    x = rng.poisson(0.4 * m).astype(float)
    design, rows = stratified_design(labels.tolist(), m, n_treated={"p": 4, "q": 6, "r": 4})
    xr = x[rows]
    D = Contrast.for_design(design, "harmonic").apply(sample_uniform_batch(design, 5, 0, 200_000), xr[:, None])[:, 0]
    var = float(np.mean(D**2))
    se = float(np.std(D**2) / np.sqrt(D.size))
    assert abs(var - variance_d(design, xr, "harmonic")) <= 3 * se
    denom = (xr / design.m.mean()).std(ddof=1)
    assert balance_ratio(design, xr) == pytest.approx(math.sqrt(variance_d(design, xr, "harmonic")) / denom)


def test_d2_pvalues_have_no_excess_mass_below_any_nominal_level():
    # conventional levels only: above roughly 0.25 the chi-square reference is anti-conservative
    spec = SizeStudySpec({"name": "clinics", "seed": 2}, tests=("d2",), reps=20_000, seed=3)
    p = run_size_study(spec).pvalues["d2"]
    for a in np.linspace(0.001, 0.10, 100):
        s = np.mean(p <= a)
        assert s <= a + 3 * math.sqrt(a * (1 - a) / p.size)


@given(st.floats(0.1, 10), st.floats(-5, 5), st.floats(0.01, 1))
@settings(max_examples=30, deadline=None)
def test_noncentrality_scale_and_shift_invariance(alpha, shift, beta):
    s = synthetic.block_mixture([{"n": 4, "n_treated": 2, "m": 2, "count": 10},
                                 {"n": 3, "n_treated": 1, "m": 5, "count": 6}], seed=0)
    x = s.values[:, 0]
    base = noncentrality(s.design, x, beta)
    assert noncentrality(s.design, alpha * x, beta / alpha) == pytest.approx(base, rel=1e-10)
    assert noncentrality(s.design, x + shift, beta) == pytest.approx(base, rel=1e-9)
    assert noncentrality(s.design, x, 2 * beta) == pytest.approx(2 * base, rel=1e-12)
    assert noncentrality(s.design, x, 0.0) == 0.0


def test_power_monotone_in_beta_and_null_size():
    spec = PowerStudySpec(({"n": 2, "n_treated": 1, "m": 1, "count": 400},),
                          beta=(0.0, 0.05, 0.1, 0.2, 0.4), weights=("harmonic",), reps=4000, seed=8)
    rows = run_power_study(spec).rows
    null = rows[0]
    assert abs(null["power"] - 0.05) <= 3 * math.sqrt(0.05 * 0.95 / spec.reps)
    for lo, hi in zip(rows, rows[1:]):
        assert hi["power"] >= lo["power"] - 2 * math.hypot(lo["stderr"], hi["stderr"])
