from types import SimpleNamespace

import numpy as np
import pytest
from numpy.testing import assert_allclose

from app.errors import EmptyIdentifiedSetError
from app.Identification.identification import (
    IdentifiedPoint,
    IdentifiedSet,
    SignRestrictionSpec,
    apply_sign_restrictions,
    shadow_rate_envelope,
    shadow_rate_path,
    solve_identified_set,
    solve_point,
    xi_grid,
)
from app.Model.core_model import gamma_from, identification_residuals, reduced_from_structural
from app.Model.types import ModelSpec

from conftest import make_structural


def _point(xi, accepted=True, beta=0.5, gamma=0.2):
    return IdentifiedPoint(xi=xi, beta=np.array([beta]), gamma=np.array([gamma]), accepted=accepted)


def _set(points, grid):
    return IdentifiedSet(points=points, betatilde=np.array([0.3]), omega=np.eye(2), grid=np.asarray(grid))


def test_xi_grid():
    grid = xi_grid(0.25)
    assert_allclose(grid, [0.0, 0.25, 0.5, 0.75, 1.0])
    assert xi_grid(0.005).size == 201
    assert xi_grid(0.5, hi=1.5)[-1] == 1.5


def test_true_point_is_recovered():
    rf = reduced_from_structural(make_structural(lam=0.5), ModelSpec(p=1))
    points = solve_point(rf.betatilde, rf.Omega, 0.5)
    matches = [pt for pt in points if abs(pt.beta[0] - 0.5) < 1e-8]
    assert len(matches) == 1
    assert matches[0].accepted
    assert matches[0].gamma[0] == pytest.approx(0.2, abs=1e-8)
    assert max(identification_residuals(rf, 0.5, matches[0].beta, matches[0].gamma)) < 1e-8


def test_censored_end_returns_betatilde():
    betatilde, omega = np.array([0.4]), np.array([[1.0, 0.3], [0.3, 0.5]])
    (pt,) = solve_point(betatilde, omega, 0.0)
    assert_allclose(pt.beta, betatilde)
    assert_allclose(pt.gamma, gamma_from(omega, betatilde))


def test_kinked_end_needs_zero_kink():
    omega = np.array([[1.0, 0.3], [0.3, 0.5]])
    assert solve_point(np.array([0.4]), omega, 1.0) == []

    (pt,) = solve_point(np.array([0.0]), omega, 1.0)
    assert pt.continuum and pt.accepted
    assert_allclose(pt.beta, [0.0])
    assert_allclose(pt.gamma, [0.3])


def test_zero_kink_gives_zero_beta():
    omega = np.array([[1.0, 0.3], [0.3, 0.5]])
    for xi in (0.0, 0.4, 0.9):
        (pt,) = solve_point(np.array([0.0]), omega, xi)
        assert_allclose(pt.beta, [0.0])
        assert not pt.continuum


def test_identified_set_with_zero_kink_spans_unit_interval():
    rf = reduced_from_structural(make_structural(lam=1.0), ModelSpec(p=1))
    assert_allclose(rf.betatilde, [0.0], atol=1e-14)
    identified = solve_identified_set(rf, grid=xi_grid(0.25), workers=1)
    assert identified.xi_projection() == (0.0, 1.0)
    assert identified.xi_intervals() == [(0.0, 1.0)]
    assert identified.notes


def test_identified_set_contains_true_xi():
    rf = reduced_from_structural(make_structural(lam=0.5), ModelSpec(p=1))
    identified = solve_identified_set(rf, grid=xi_grid(0.05), workers=1)
    assert 0.5 in {pt.xi for pt in identified.accepted()}
    frame = identified.to_frame()
    assert {"xi", "accepted", "beta1", "gamma1"} <= set(frame.columns)


def test_grid_outside_bounds_rejected():
    rf = reduced_from_structural(make_structural(), ModelSpec(p=1))
    with pytest.raises(ValueError):
        solve_identified_set(rf, grid=[0.0, 1.2], bounds=(0.0, 1.0), workers=1)
    identified = solve_identified_set(rf, grid=[0.0, 1.2], bounds=(0.0, 1.5), workers=1)
    assert identified.bounds == (0.0, 1.5)


def test_xi_intervals_and_projection():
    grid = [0.0, 0.1, 0.2, 0.3, 0.4]
    points = [_point(0.0), _point(0.1), _point(0.2, accepted=False), _point(0.3), _point(0.4, accepted=False)]
    identified = _set(points, grid)
    assert identified.xi_intervals() == [(0.0, 0.1), (0.3, 0.3)]
    assert identified.xi_projection() == (0.0, 0.3)
    assert _set([_point(0.0, accepted=False)], [0.0]).xi_projection() is None


def _stub_engine(point, est, data, latent, req):
    response = np.full(req.horizon + 1, point.xi - 0.5)
    return SimpleNamespace(response_of=lambda name: response)


def test_sign_restrictions_shrink_the_set():
    grid = xi_grid(0.25)
    identified = _set([_point(xi) for xi in grid], grid)
    srs = SignRestrictionSpec(signs={"y1": ">=0"}, horizons=(0, 2), dates=["2000Q3"])
    est = SimpleNamespace(latent=None)
    out = apply_sign_restrictions(identified, est, None, srs, irf_engine=_stub_engine, workers=1)
    assert out.xi_projection() == (0.5, 1.0)
    rejected = [pt for pt in out.points if not pt.accepted]
    assert [pt.xi for pt in rejected] == [0.0, 0.25]
    assert rejected[0].rejection_reason == "sign restriction"
    assert rejected[0].violation == {"date": "2000Q3", "horizon": 0, "variable": "y1", "value": -0.5}
    # the input set is left alone
    assert identified.xi_projection() == (0.0, 1.0)


def test_free_signs_are_a_no_op():
    identified = _set([_point(0.5)], [0.5])
    srs = SignRestrictionSpec(signs={"y1": "free"})
    assert apply_sign_restrictions(identified, None, None, srs) is identified


def test_sign_horizons_validated():
    with pytest.raises(ValueError):
        SignRestrictionSpec(signs={"y1": "<=0"}, horizons=(3, 1))


def _latent():
    return SimpleNamespace(
        dates=("2000Q1", "2000Q2", "2000Q3"),
        bound=np.zeros(3),
        elb=np.array([False, True, False]),
        smoothed_mean=np.array([0.0, -0.4, 0.0]),
        observed=np.array([0.5, 0.0, 0.3]),
        reduced_shadow=np.array([0.5, -0.4, 0.3]),
    )


def test_shadow_rate_path():
    latent = _latent()
    assert_allclose(shadow_rate_path(_point(1.0), 0.0, latent), [0.5, -0.4, 0.3])
    assert_allclose(shadow_rate_path(_point(0.0), 0.0, latent), [0.5, -0.36, 0.3])
    assert_allclose(shadow_rate_path(_point(0.0), 0.5, latent), [0.5, -0.54, 0.3])
    assert_allclose(shadow_rate_path(_point(0.0), 0.0, latent, bound=0.1), [0.5, -0.35, 0.3])


def test_shadow_rate_envelope():
    latent = _latent()
    frame = shadow_rate_envelope(_set([_point(0.0), _point(1.0)], [0.0, 1.0]), 0.0, latent)
    assert_allclose(frame["lower"], [0.5, -0.4, 0.3])
    assert_allclose(frame["upper"], [0.5, -0.36, 0.3])
    assert frame["elb"].tolist() == [0, 1, 0]

    with pytest.raises(EmptyIdentifiedSetError):
        shadow_rate_envelope(_set([_point(0.0, accepted=False)], [0.0]), 0.0, latent)
