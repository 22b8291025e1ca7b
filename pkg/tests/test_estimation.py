import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from app.errors import ConfigValidationError, DataValidationError, NestingError
from app.Estimation.estimation import (
    EstimationResult,
    FitOptions,
    ParameterLayout,
    StartDiagnostics,
    evaluate,
    fit,
    warm_start,
)
from app.Estimation import hypothesis_tests
from app.Estimation.hypothesis_tests import chi2_pvalue, default_exclusion_targets, ih1_restrictions, lr_test, select_lag
from app.Model.core_model import build_regressors, reduced_from_structural, simulate
from app.Model.types import ModelSpec, Variant

from conftest import make_structural, random_dataset


def _layout(data, spec):
    return ParameterLayout.build(spec, build_regressors(data, spec), data.exog_names)


def _npar(data, variant, p, restrictions=()):
    spec = ModelSpec(variant=variant, p=p).with_restrictions(restrictions)
    return _layout(data, spec).npar


@pytest.mark.parametrize("lr, df, lo, hi", [
    (25.63, 15, 0.041, 0.043),
    (4.671, 6, 0.585, 0.590),
    (8.981, 4, 0.061, 0.063),
])
def test_chi2_pvalues(lr, df, lo, hi):
    assert lo <= chi2_pvalue(lr, df) <= hi


def test_chi2_pvalue_small():
    assert chi2_pvalue(51.02, 11) < 0.0005
    assert chi2_pvalue(-1.0, 3) == 1.0


def test_parameter_counts():
    data = random_dataset(80, 4, seed=5)
    assert _npar(data, Variant.CKSVAR, 3) == 4 * 13 + 4 * 3 + 3 + 10
    assert _npar(data, Variant.KSVAR, 3) == 4 * 13 + 3 + 10
    assert _npar(data, Variant.CSVAR, 3) == 4 * 13 + 10


def test_short_rate_exclusion_degrees_of_freedom():
    data = random_dataset(80, 4, seed=5)
    equations = ("y1", "y2", "y3", "i")
    unrestricted = _npar(data, Variant.CKSVAR, 3)
    restricted = _npar(data, Variant.CKSVAR, 3, ih1_restrictions(equations, 3, Variant.CKSVAR))
    assert unrestricted - restricted == 21
    unrestricted = _npar(data, Variant.KSVAR, 3)
    restricted = _npar(data, Variant.KSVAR, 3, ih1_restrictions(equations, 3, Variant.KSVAR))
    assert unrestricted - restricted == 12


@pytest.mark.parametrize("p, df", [(3, 15), (2, 11)])
def test_censoring_only_degrees_of_freedom(p, df):
    data = random_dataset(80, 4, seed=6)
    assert _npar(data, Variant.CKSVAR, p) - _npar(data, Variant.CSVAR, p) == df


def test_long_rate_exclusion_degrees_of_freedom():
    data = random_dataset(80, 4, seed=7)
    restrictions = [(eq, f"y3_L{j}") for eq in ("y1", "y2") for j in range(1, 4)]
    assert _npar(data, Variant.CKSVAR, 3) - _npar(data, Variant.CKSVAR, 3, restrictions) == 6


def test_unknown_restriction_is_reported():
    data = random_dataset(40, 2, seed=1)
    spec = ModelSpec(p=1, restrictions=(("y1", "nope_L1"), ("i", "kink")))
    with pytest.raises(ConfigValidationError) as info:
        _layout(data, spec)
    assert len(info.value.problems) == 2


def test_pack_unpack_is_identity():
    data = random_dataset(60, 3, seed=8)
    spec = ModelSpec(p=2)
    layout = _layout(data, spec)
    rf = warm_start(spec, data, layout=layout)
    theta = layout.pack(rf)
    assert theta.size == layout.npar
    assert len(layout.labels) == layout.npar
    back = layout.unpack(theta)
    assert_allclose(back.C, rf.C)
    assert_allclose(back.Omega, rf.Omega)


def test_csvar_ties_latent_loadings_to_policy_lags():
    data = random_dataset(60, 3, seed=8)
    spec = ModelSpec(variant=Variant.CSVAR, p=2)
    layout = _layout(data, spec)
    rf = layout.unpack(layout.pack(warm_start(spec, data, layout=layout)))
    assert_allclose(rf.Cstar, rf.C[:, list(rf.y2_lag_columns)])
    assert_allclose(rf.betatilde, 0.0)


def _result(variant, p, loglik, npar, fingerprint="sha256:a", t_eff=100, restrictions=(), converged=True):
    start = StartDiagnostics(index=0, loglik=loglik, status=0 if converged else 1, message="", nfev=1,
                             converged=converged, theta=np.zeros(npar))
    return EstimationResult(
        spec=ModelSpec(variant=variant, p=p, restrictions=restrictions), params=None, loglik=loglik,
        npar=npar, t_eff=t_eff, aic_per_obs=0.0, covariance=None, theta=np.zeros(npar),
        param_labels=(), standard_errors=None, diagnostics=[start], latent=None,
        data_fingerprint=fingerprint, condition_on=p, best_start=0,
    )


def test_lr_test_statistic():
    test = lr_test(_result(Variant.CSVAR, 3, -100.0, 62), _result(Variant.CKSVAR, 3, -90.0, 77))
    assert test.lr == pytest.approx(20.0)
    assert test.df == 15
    assert test.pvalue == pytest.approx(chi2_pvalue(20.0, 15))


def test_lr_test_equal_fits():
    test = lr_test(_result(Variant.KSVAR, 1, -50.0, 10), _result(Variant.CKSVAR, 1, -50.0, 12))
    assert test.lr == 0.0
    assert test.pvalue == 1.0
    assert not test.clipped


def test_lr_test_clips_small_negative_statistic():
    test = lr_test(_result(Variant.KSVAR, 1, -50.0, 10), _result(Variant.CKSVAR, 1, -50.00001, 12))
    assert test.clipped
    assert test.lr == 0.0
    assert test.converged


def test_lr_test_flags_fits_that_did_not_converge():
    suspicious = lr_test(_result(Variant.KSVAR, 1, -50.0, 10), _result(Variant.CKSVAR, 1, -51.0, 12))
    assert suspicious.clipped
    assert not suspicious.converged
    assert suspicious.to_dict()["converged"] is False
    stalled = lr_test(_result(Variant.KSVAR, 1, -50.0, 10, converged=False), _result(Variant.CKSVAR, 1, -40.0, 12))
    assert not stalled.converged
    assert stalled.lr == pytest.approx(20.0)


@pytest.mark.parametrize("restricted, unrestricted", [
    (_result(Variant.CKSVAR, 1, -1.0, 10), _result(Variant.KSVAR, 1, -1.0, 12)),
    (_result(Variant.KSVAR, 1, -1.0, 10, fingerprint="sha256:b"), _result(Variant.CKSVAR, 1, -1.0, 12)),
    (_result(Variant.KSVAR, 1, -1.0, 10, t_eff=99), _result(Variant.CKSVAR, 1, -1.0, 12)),
    (_result(Variant.KSVAR, 1, -1.0, 12), _result(Variant.CKSVAR, 1, -1.0, 12)),
])
def test_lr_test_rejects_non_nested(restricted, unrestricted):
    with pytest.raises(NestingError):
        lr_test(restricted, unrestricted)


@pytest.mark.slow
def test_fit_is_deterministic_and_converges():
    s = make_structural()
    data = simulate(s, ModelSpec(variant=Variant.KSVAR, p=1), T=160, seed=21).dataset
    spec = ModelSpec(variant=Variant.KSVAR, p=1)
    options = FitOptions(n_starts=2, seed=4, covariance="none", workers=1)
    first = fit(spec, data, options)
    second = fit(spec, data, options)
    assert first.converged
    assert first.loglik == second.loglik
    assert_allclose(first.theta, second.theta)
    assert math.isfinite(first.loglik)
    assert evaluate(spec, data, first.params, options) == pytest.approx(first.loglik, abs=1e-8)
    assert first.aic_per_obs == pytest.approx((2 * first.npar - 2 * first.loglik) / first.t_eff)


def test_hypothesis_tests_check_their_inputs():
    data = random_dataset(60, 3, seed=9)
    with pytest.raises(ValueError):
        hypothesis_tests.test_ih1(data, 1, Variant.CSVAR)
    with pytest.raises(DataValidationError):
        hypothesis_tests.test_ih1(data, 1, long_rate="nope")
    with pytest.raises(DataValidationError):
        hypothesis_tests.test_exclusion(data, 1, "cksvar", "i")
    with pytest.raises(DataValidationError):
        hypothesis_tests.test_exclusion(data, 1, "cksvar", "y2", ["zz"])
    with pytest.raises(ValueError):
        select_lag(data, 0)


def test_exclusion_targets_default_to_other_unconstrained_equations():
    data = random_dataset(60, 4, seed=9)
    assert default_exclusion_targets(data, ModelSpec(p=1), "y3") == ("y1", "y2")


@pytest.mark.slow
def test_lag_selection_on_var1_data():
    s = make_structural()
    spec = ModelSpec(variant=Variant.KSVAR, p=1)
    options = FitOptions(n_starts=1, seed=2, covariance="none", workers=1)
    picks = []
    for seed in (41, 42, 43):
        data = simulate(s, spec, T=200, seed=seed).dataset
        selection = select_lag(data, 2, Variant.KSVAR, options)
        assert {f.t_eff for f in selection.fits.values()} == {data.T - 2}
        assert {f.condition_on for f in selection.fits.values()} == {2}
        assert selection.table[0]["df"] == selection.fits[2].npar - selection.fits[1].npar
        picks.append(selection.p_aic)
    assert picks.count(1) >= 2


@pytest.mark.slow
def test_lr_statistics_add_up_over_nested_lags():
    data = simulate(make_structural(), ModelSpec(variant=Variant.KSVAR, p=1), T=200, seed=44).dataset
    options = FitOptions(n_starts=2, seed=3, covariance="none", workers=1, condition_on=3)
    fits = {p: fit(ModelSpec(variant=Variant.KSVAR, p=p), data, options) for p in (1, 2, 3)}
    one_two, two_three = lr_test(fits[1], fits[2]), lr_test(fits[2], fits[3])
    one_three = lr_test(fits[1], fits[3])
    assert not (one_two.clipped or two_three.clipped)
    assert one_three.df == one_two.df + two_three.df
    assert one_three.lr == pytest.approx(one_two.lr + two_three.lr, abs=1e-9)


@pytest.mark.slow
def test_fit_recovers_simulated_parameters():
    s = make_structural()
    spec = ModelSpec(variant=Variant.KSVAR, p=1)
    truth = reduced_from_structural(s, spec)
    options = FitOptions(n_starts=2, seed=1, workers=1)
    within, total = 0, 0
    for seed in (31, 32, 33):
        data = simulate(s, spec, T=400, seed=seed).dataset
        result = fit(spec, data, options)
        assert result.converged
        assert result.standard_errors is not None
        theta = _layout(data, spec).pack(truth)
        within += int(np.sum(np.abs(result.theta - theta) <= 3.0 * result.standard_errors))
        total += theta.size
    assert within >= 0.9 * total
