import numpy as np
import pytest
import statsmodels.api as sm

from randbal.comparators import (
    DevianceTest,
    block_indicators,
    column_rank,
    deviance_balance_test,
    fit_logistic,
    noclus_z_test,
    noclus_z_test_units,
    null_deviance,
)
from randbal.data import BalanceError, InputError, UnitRecord, aggregate_units, build_design, design_from_arrays
from randbal.randomization import sample_uniform_batch

from conftest import chi2_sf_oracle


def test_noclus_d1_units():
    z, p = noclus_z_test([1, 2, 3, 4], [1, 1, 0, 0])
    # (1.5 - 3.5) / (sd * sqrt(1)) with sd = sqrt(5/3)
    assert z == pytest.approx(-2 / np.sqrt(5 / 3), rel=1e-13)
    assert p == pytest.approx(0.121335, abs=1e-6)


def test_noclus_errors():
    with pytest.raises(InputError):
        noclus_z_test([1, 2], [1])
    with pytest.raises(BalanceError):
        noclus_z_test([1, 1, 1], [1, 0, 0])
    with pytest.raises(BalanceError):
        noclus_z_test([1, 2, 3], [1, 1, 1])


def test_noclus_on_unit_data():
    units = [UnitRecord("h1", "A", 1, (1.0,)), UnitRecord("h1", "A", 1, (0.0,)),
             UnitRecord("h2", "A", 0, (1.0,)), UnitRecord("h3", "A", 0, (0.0,))]
    clusters, X = aggregate_units(units, ["v"])
    design = build_design(clusters)
    z, p = noclus_z_test_units(design, X, "v")
    want = noclus_z_test([1, 0, 1, 0], [1, 1, 0, 0])
    assert (z, p) == pytest.approx(want)


def statsmodels_fit(y, X):
    return sm.GLM(y, X, family=sm.families.Binomial()).fit(tol=1e-12)


def test_logistic_matches_statsmodels():
    rng = np.random.default_rng(2)
    n = 200
    X = np.column_stack([np.ones(n), rng.normal(size=(n, 3))])
    y = (rng.random(n) < 1 / (1 + np.exp(-(X @ [0.2, 1.0, -0.5, 0.0])))).astype(float)
    ours = fit_logistic(y, X)
    ref = statsmodels_fit(y, X)
    assert ours.converged and not ours.separation_flag
    assert np.allclose(ours.coefficients, ref.params, rtol=1e-7, atol=1e-9)
    assert np.allclose(ours.std_errors, ref.bse, rtol=1e-6)
    assert ours.deviance == pytest.approx(ref.deviance, rel=1e-9)


def test_logistic_drops_aliased_column():
    rng = np.random.default_rng(5)
    n = 100
    a = rng.normal(size=n)
    X = np.column_stack([np.ones(n), a, 2 * a])
    y = (rng.random(n) < 0.4).astype(float)
    fit = fit_logistic(y, X)
    assert fit.rank == 2
    assert np.isnan(fit.coefficients).sum() == 1
    ref = statsmodels_fit(y, X[:, :2])
    assert fit.deviance == pytest.approx(ref.deviance, rel=1e-9)


def test_logistic_flags_separation():
    x = np.arange(10.0)
    X = np.column_stack([np.ones(10), x])
    y = (x > 4.5).astype(float)
    fit = fit_logistic(y, X)
    assert fit.separation_flag
    assert fit.deviance < 1e-3


def test_logistic_input_checks():
    with pytest.raises(InputError):
        fit_logistic([0, 1, 2], np.ones((3, 1)))
    with pytest.raises(InputError):
        fit_logistic([0, 1], np.ones((3, 1)))
    with pytest.raises(InputError):
        fit_logistic([0, 1, 1], np.zeros((3, 1)))


def test_column_rank():
    X = np.column_stack([np.ones(5), np.arange(5.0), np.arange(5.0) + 1, np.zeros(5)])
    kept, rank = column_rank(X)
    assert rank == 2 and kept.size == 2 and 3 not in kept


def test_null_deviance_closed_form():
    design, _ = design_from_arrays([0] * 5 + [1] * 4, [1, 1, 0, 0, 0, 1, 0, 0, 0], [1] * 9)
    ref = statsmodels_fit(design.z.astype(float), block_indicators(design))
    assert null_deviance(design) == pytest.approx(ref.deviance, rel=1e-12)


def test_deviance_test_matches_statsmodels_lrt():
    rng = np.random.default_rng(9)
    n = 40
    block = np.repeat([0, 1], [24, 16])
    z = np.concatenate([np.r_[np.ones(8), np.zeros(16)], np.r_[np.ones(6), np.zeros(10)]])
    m = rng.integers(1, 10, size=n)
    x = rng.normal(size=(n, 2)) * m[:, None]
    design, X = design_from_arrays(block, z, m, x)
    r = deviance_balance_test(design, X)
    full = np.column_stack([block_indicators(design), design.m, X])
    ref_full = statsmodels_fit(design.z.astype(float), full)
    ref_null = statsmodels_fit(design.z.astype(float), block_indicators(design))
    lrt = ref_null.deviance - ref_full.deviance
    assert r.df == 3
    assert r.lrt == pytest.approx(lrt, rel=1e-8)
    assert r.p == pytest.approx(chi2_sf_oracle(lrt, 3), rel=1e-8)


def test_deviance_test_degenerate_when_nothing_to_test(d1):
    design, _ = d1
    const = np.ones((4, 1))
    r = deviance_balance_test(design, const, include_size=True)
    assert r.degenerate and r.df == 0 and r.p == 1.0


def test_deviance_test_reuse_over_assignments(d3):
    design, X = d3
    dev = DevianceTest(design, X)
    for z in sample_uniform_batch(design, 1, 0, 5):
        a = dev.run(z)
        b = deviance_balance_test(design.with_assignment(z), X)
        assert a.lrt == pytest.approx(b.lrt, abs=1e-9)
