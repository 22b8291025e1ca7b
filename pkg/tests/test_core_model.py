import numpy as np
import pytest
from numpy.testing import assert_allclose

from app.errors import DataValidationError, InsufficientSampleError, SingularityError
from app.Model.core_model import (
    betatilde_from,
    build_regressors,
    companion_matrix,
    detect_regimes,
    gamma_from,
    impact_multipliers,
    is_coherent,
    kappa_factor,
    reduced_from_structural,
    simulate,
    simulate_reduced_form,
    spectral_radius,
    structural_matrix,
)
from app.Model.types import Dataset, ModelSpec, Variant
from app.serialization import quarter_labels

from conftest import make_structural, random_dataset


def test_impact_multipliers():
    above, below = impact_multipliers(0.5, 0.2, 0.5)
    assert_allclose(above, [0.5 / 0.9])
    assert_allclose(below, [0.25 / 0.95])

    above, below = impact_multipliers([0.5], [0.2], 1.0)
    assert_allclose(above, below)

    _, below = impact_multipliers([0.5], [0.2], 0.0)
    assert_allclose(below, [0.0])


def test_kappa_and_betatilde_limits():
    beta, gamma = np.array([0.5]), np.array([0.2])
    assert kappa_factor(1.0, beta, gamma) == pytest.approx(1.0)
    assert kappa_factor(0.0, beta, gamma) == pytest.approx(0.9)
    assert kappa_factor(0.0, beta, gamma, alpha=0.5) == pytest.approx(1.35)
    assert_allclose(betatilde_from(0.0, beta, gamma), beta)
    assert_allclose(betatilde_from(1.0, beta, gamma), [0.0])


def test_coherency():
    assert is_coherent(0.5, 0.1)
    assert not is_coherent(0.5, 1.5)
    assert not is_coherent(0.0, 1.0)


def test_singular_kappa_raises():
    with pytest.raises(SingularityError):
        kappa_factor(1.0, np.array([1.0]), np.array([1.0]))


def test_detect_regimes(small_dataset):
    regimes = detect_regimes(small_dataset)
    assert regimes.D.tolist() == [0, 0, 1, 0, 0, 0]
    assert regimes.spells == ((2, 2),)
    assert regimes.share == pytest.approx(1 / 6)


def test_build_regressors_shapes():
    data = random_dataset(10, 2, seed=1)
    bundle = build_regressors(data, ModelSpec(p=2))
    assert bundle.t_eff == 8
    assert bundle.X.shape == (8, 5)
    assert bundle.labels == ("const", "y1_L1", "i_L1", "y1_L2", "i_L2")
    assert bundle.y2_lag_columns == (2, 4)
    assert bundle.latent_labels == ("i*_L1", "i*_L2")


def test_build_regressors_conditioning_shortens_sample():
    data = random_dataset(20, 2, seed=1)
    bundle = build_regressors(data, ModelSpec(p=1), condition_on=3)
    assert bundle.t_eff == 17
    assert bundle.dates[0] == data.dates[3]
    with pytest.raises(ValueError):
        build_regressors(data, ModelSpec(p=2), condition_on=1)


def test_build_regressors_insufficient_sample():
    data = random_dataset(4, 3, seed=2)
    with pytest.raises(InsufficientSampleError):
        build_regressors(data, ModelSpec(p=2))


def test_latent_slots(small_dataset):
    spec = ModelSpec(p=1)
    bundle = build_regressors(small_dataset, spec)
    # row 2 is 2000Q4, whose first lag (2000Q3) sat at the bound
    assert np.isnan(bundle.latent_slots[2, 0])
    assert np.count_nonzero(np.isnan(bundle.latent_slots)) == 1

    latent = np.array([0.5, 0.4, -0.3, 0.3, 0.6, 0.5])
    bundle = build_regressors(small_dataset, spec, latent=latent)
    assert bundle.latent_slots[2, 0] == pytest.approx(-0.3)
    assert_allclose(np.delete(bundle.latent_slots[:, 0], 2), 0.0)


def test_no_spells_means_no_latent_slots():
    data = random_dataset(30, 2, seed=3)
    lifted = Dataset(dates=data.dates, values=np.column_stack([data.values[:, 0], data.bound + 1.0]),
                     bound=data.bound, names=data.names, constrained_index=1)
    bundle = build_regressors(lifted, ModelSpec(p=2))
    assert not bundle.D.any()
    assert_allclose(bundle.latent_slots, 0.0)


def test_dataset_below_bound_rejected():
    data = Dataset(dates=quarter_labels("2000Q1", 3), values=[[0.1, 0.2], [0.0, -0.5], [0.3, 0.1]],
                   bound=0.0, names=("y", "i"), constrained_index=1)
    with pytest.raises(DataValidationError):
        data.validate()


def test_reduced_form_recovers_structure(structural, spec):
    rf = reduced_from_structural(structural, spec)
    assert_allclose(gamma_from(rf.Omega, structural.beta), structural.gamma, atol=1e-10)
    assert_allclose(rf.betatilde, betatilde_from(structural.xi, structural.beta, structural.gamma))
    kappa = kappa_factor(structural.xi, structural.beta, structural.gamma)
    A = structural_matrix(structural.beta, structural.gamma)
    assert_allclose(rf.Cstar, kappa * np.linalg.solve(A, [[0.05], [0.3]]))
    assert spectral_radius(companion_matrix(rf, spec)) == pytest.approx(0.7369, abs=1e-3)


def test_ksvar_reduced_form_drops_latent_loadings(structural):
    rf = reduced_from_structural(structural, ModelSpec(variant=Variant.KSVAR, p=1))
    assert_allclose(rf.Cstar, 0.0)


def test_simulate_respects_bound(structural, spec):
    path = simulate(structural, spec, T=200, seed=7)
    data = path.dataset
    assert data.T == 200
    assert np.all(data.y2 >= data.bound - 1e-12)
    D = detect_regimes(data).D.astype(bool)
    assert D.any()
    assert np.all(path.shadow[D] <= data.bound[D] + 1e-12)
    assert_allclose(path.shadow[~D], data.y2[~D])


def test_simulate_is_deterministic(structural, spec):
    first = simulate(structural, spec, T=50, seed=11)
    second = simulate(structural, spec, T=50, seed=11)
    assert_allclose(first.dataset.values, second.dataset.values)
    assert_allclose(first.shadow, second.shadow)


def test_simulate_far_from_bound_is_linear(structural, spec):
    T, seed = 40, 5
    path = simulate(structural, spec, T=T, seed=seed, bound=-1e6)
    rf = reduced_from_structural(structural, spec)
    A = structural_matrix(structural.beta, structural.gamma)
    impact = np.linalg.solve(A, np.diag([1.0, 0.5]))
    u = np.random.default_rng(seed).standard_normal((T, 2)) @ impact.T
    Y = np.zeros((T, 2))
    for t in range(1, T):
        Y[t] = rf.C @ np.concatenate([[1.0], Y[t - 1]]) + u[t]
    assert_allclose(path.dataset.values, Y, atol=1e-10)


def test_kinked_model_without_latent_lags_matches_ksvar():
    s = make_structural(lam=0.0, latent=False)
    censored = simulate(s, ModelSpec(variant=Variant.CKSVAR, p=1), T=80, seed=3)
    kinked = simulate(s, ModelSpec(variant=Variant.KSVAR, p=1), T=80, seed=3)
    assert_allclose(censored.dataset.values, kinked.dataset.values)


def test_reduced_form_simulation_replays_structural_path(structural, spec):
    T, seed = 120, 9
    path = simulate(structural, spec, T=T, seed=seed)
    assert detect_regimes(path.dataset).D.any()
    rf = reduced_from_structural(structural, spec)
    impact = np.linalg.solve(structural_matrix(structural.beta, structural.gamma), np.diag([1.0, 0.5]))
    u = np.random.default_rng(seed).standard_normal((T, 2)) @ impact.T
    replay = simulate_reduced_form(rf, spec, T=T, seed=0, errors=u)
    assert_allclose(replay.dataset.values, path.dataset.values, atol=1e-10)
    assert_allclose(replay.reduced_shadow, path.reduced_shadow, atol=1e-10)
    assert_allclose(replay.shadow, replay.reduced_shadow)
