import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import stats

from app.Model.likelihood import LikelihoodConfig, loglik, loglik_cksvar, loglik_ksvar, smooth_latent
from app.Model.types import Dataset, ModelSpec, ReducedFormParams, Variant

from conftest import random_dataset

OMEGA = np.array([[1.0, 0.3], [0.3, 0.5]])
C = np.array([[0.1, 0.5, 0.2], [0.2, 0.1, 0.6]])


def make_rf(cstar=(0.1, 0.2), betatilde=0.4) -> ReducedFormParams:
    return ReducedFormParams.from_omega(C=C, Cstar=np.array(cstar, dtype=float).reshape(2, 1),
                                        betatilde=[betatilde], Omega=OMEGA,
                                        labels=("const", "y1_L1", "i_L1"), y2_lag_columns=(2,))


def _mean(y_prev: np.ndarray, slot: float, rf: ReducedFormParams) -> np.ndarray:
    return rf.C @ np.concatenate([[1.0], y_prev]) + rf.Cstar[:, 0] * slot


def quadrature_loglik(rf: ReducedFormParams, data: Dataset):
    """Exact log-likelihood for one bound period at t=2, integrating its shadow gap."""
    Y, b = data.values, data.bound
    mvn = stats.multivariate_normal(mean=np.zeros(2), cov=rf.Omega)
    total = 0.0
    for t in (1, 4, 5):
        total += mvn.logpdf(Y[t] - _mean(Y[t - 1], 0.0, rf))

    nodes, weights = np.polynomial.legendre.leggauss(2000)
    lo, hi = -10.0, 0.0
    g = 0.5 * (hi - lo) * nodes + 0.5 * (hi + lo)
    w = 0.5 * (hi - lo) * weights
    m = _mean(Y[1], 0.0, rf)
    u1 = Y[2, 0] - m[0] + rf.betatilde[0] * g
    u2 = g + b[2] - m[1]
    at_bound = mvn.pdf(np.column_stack([u1, u2]))
    following = np.array([mvn.pdf(Y[3] - _mean(Y[2], gi, rf)) for gi in g])
    integrand = at_bound * following
    mass = float(np.sum(w * integrand))
    posterior_mean = float(np.sum(w * integrand * g)) / mass
    return total + math.log(mass), posterior_mean


def test_ksvar_without_spells_is_gaussian():
    data = random_dataset(40, 2, seed=4, elb_share=0.0)
    data = Dataset(dates=data.dates, values=np.column_stack([data.values[:, 0], data.values[:, 1] + 5.0]),
                   bound=0.0, names=data.names, constrained_index=1)
    rf = make_rf()
    spec = ModelSpec(variant=Variant.KSVAR, p=1)
    expected = sum(
        stats.multivariate_normal(mean=np.zeros(2), cov=OMEGA).logpdf(
            data.values[t] - C @ np.concatenate([[1.0], data.values[t - 1]]))
        for t in range(1, data.T)
    )
    assert loglik_ksvar(rf, data, spec) == pytest.approx(expected, rel=1e-10)
    censored, _ = loglik_cksvar(rf, data, ModelSpec(variant=Variant.CKSVAR, p=1), smooth=False)
    assert censored == pytest.approx(expected, rel=1e-10)


def test_ksvar_censored_period_matches_quadrature(small_dataset):
    rf = make_rf(cstar=(0.0, 0.0))
    expected, _ = quadrature_loglik(rf, small_dataset)
    value = loglik_ksvar(rf, small_dataset, ModelSpec(variant=Variant.KSVAR, p=1))
    assert value == pytest.approx(expected, abs=1e-6)


def test_ksvar_rejects_active_latent_lags(small_dataset):
    with pytest.raises(ValueError):
        loglik_ksvar(make_rf(), small_dataset, ModelSpec(variant=Variant.CKSVAR, p=1))


def test_particle_filter_matches_quadrature(small_dataset):
    rf = make_rf()
    expected, posterior_mean = quadrature_loglik(rf, small_dataset)
    cfg = LikelihoodConfig(n_particles=100_000, seed=3)
    value, latent = loglik_cksvar(rf, small_dataset, ModelSpec(p=1), cfg)
    assert value == pytest.approx(expected, abs=2e-3)

    row = latent.dates.index("2000Q3")
    assert latent.elb[row]
    assert latent.smoothed_mean[row] == pytest.approx(posterior_mean, abs=5e-3)
    assert latent.smoothed_mean[row] < 0.0
    off = ~latent.elb
    assert_allclose(latent.smoothed_mean[off], latent.observed[off])


def test_particle_filter_is_deterministic(small_dataset):
    rf = make_rf()
    cfg = LikelihoodConfig(n_particles=512, seed=9)
    first, _ = loglik_cksvar(rf, small_dataset, ModelSpec(p=1), cfg, smooth=False)
    second, _ = loglik_cksvar(rf, small_dataset, ModelSpec(p=1), cfg, smooth=False)
    assert first == second


def test_dispatch_by_variant(small_dataset):
    rf = make_rf(cstar=(0.0, 0.0))
    exact = loglik(rf, small_dataset, ModelSpec(variant=Variant.KSVAR, p=1))
    assert exact == loglik_ksvar(rf, small_dataset, ModelSpec(variant=Variant.KSVAR, p=1))


def test_closed_form_latent_for_kinked_model(small_dataset):
    rf = make_rf(cstar=(0.0, 0.0))
    latent = smooth_latent(rf, small_dataset, ModelSpec(variant=Variant.KSVAR, p=1))
    assert latent.method == "closed_form"
    row = latent.dates.index("2000Q3")
    assert latent.smoothed_mean[row] < 0.0
    assert latent.smoothed_std[row] > 0.0
    lo, mid, hi = latent.smoothed_quantiles[row]
    assert lo <= mid <= hi <= 0.0
