from types import SimpleNamespace

import numpy as np
import pytest
from numpy.testing import assert_allclose

from app.errors import EmptyIdentifiedSetError
from app.Estimation.estimation import FitOptions
from app.Identification.identification import IdentifiedPoint, IdentifiedSet
from app.Identification.irf import (
    IRFRequest,
    bootstrap_girf_bands,
    default_flow_variables,
    girf,
    girf_envelope,
    irf_timeline,
    linear_irf,
)
from app.Model.core_model import reduced_from_structural, simulate
from app.Model.types import Dataset, ModelSpec

from conftest import make_structural


def _point(xi=0.5, beta=0.5, gamma=0.2):
    return IdentifiedPoint(xi=xi, beta=np.array([beta]), gamma=np.array([gamma]), accepted=True)


def _estimate(structural=None):
    spec = ModelSpec(p=1)
    rf = reduced_from_structural(structural or make_structural(), spec)
    return SimpleNamespace(params=rf, spec=spec, condition_on=1, latent=None)


def test_zero_shock_has_zero_response(small_dataset):
    est = _estimate()
    result = girf(_point(), est, small_dataset, None, IRFRequest(shock=0.0, horizon=6, draws=50))
    assert np.all(result.response == 0.0)
    assert result.variables == ("y1", "i")
    assert result.date == "2001Q2"


def test_never_binding_bound_matches_linear_responses():
    s = make_structural()
    spec = ModelSpec(p=1)
    data = simulate(s, spec, T=40, seed=3, bound=-1e6).dataset
    est = _estimate(s)
    point = _point()
    req = IRFRequest(shock=-0.25, horizon=8, draws=20, seed=1)
    result = girf(point, est, data, None, req)
    expected = linear_irf(est.params, point, spec, 8, -0.25)
    assert_allclose(result.response, expected, atol=1e-10)
    assert result.regime == 0


def test_cumulative_responses(small_dataset):
    est = _estimate()
    req = IRFRequest(horizon=4, draws=40, seed=7)
    levels = girf(_point(), est, small_dataset, None, req)
    cumulated = girf(_point(), est, small_dataset, None, req.model_copy(update={"cumulative": True}))
    assert_allclose(cumulated.response, np.cumsum(levels.response, axis=0))


def test_girf_is_deterministic_given_seed(small_dataset):
    est = _estimate()
    req = IRFRequest(horizon=4, draws=40, seed=11, date="2000Q3")
    first = girf(_point(), est, small_dataset, None, req)
    second = girf(_point(), est, small_dataset, None, req)
    assert_allclose(first.response, second.response)
    assert first.regime == 1


def test_unknown_date_rejected(small_dataset):
    with pytest.raises(ValueError):
        girf(_point(), _estimate(), small_dataset, None, IRFRequest(date="1999Q1", draws=4))


def test_envelope_brackets_each_point(small_dataset):
    est = _estimate()
    points = [_point(0.0), _point(0.5)]
    identified = IdentifiedSet(points=points, betatilde=est.params.betatilde, omega=est.params.Omega,
                               grid=np.array([0.0, 0.5]))
    req = IRFRequest(horizon=4, draws=40, seed=2)
    envelope = girf_envelope(identified, est, small_dataset, None, req, workers=1)
    assert envelope.points == 2
    for pt in points:
        response = girf(pt, est, small_dataset, None, req).response
        assert np.all(envelope.lower <= response + 1e-12)
        assert np.all(envelope.upper >= response - 1e-12)
    frame = envelope.to_frame()
    assert len(frame) == 5 * 2


def test_empty_envelope_raises(small_dataset):
    identified = IdentifiedSet(points=[], betatilde=np.array([0.1]), omega=np.eye(2), grid=np.array([0.0]))
    with pytest.raises(EmptyIdentifiedSetError):
        girf_envelope(identified, _estimate(), small_dataset, None, workers=1)


def test_default_flow_variables():
    values = np.zeros((3, 4))
    with_roles = Dataset(dates=("2000Q1", "2000Q2", "2000Q3"), values=values, bound=0.0,
                         names=("pi", "gap", "rl", "ffr"),
                         roles={"inflation": "pi", "output_gap": "gap", "long_rate": "rl"})
    assert default_flow_variables(with_roles) == ("pi", "gap")
    bare = Dataset(dates=("2000Q1", "2000Q2", "2000Q3"), values=values, bound=0.0,
                   names=("pi", "gap", "rl", "ffr"), roles={"long_rate": "rl"})
    assert default_flow_variables(bare) == ("pi", "gap")


def test_timeline_envelopes_by_date(small_dataset):
    est = _estimate()
    points = [_point(0.0), _point(0.5)]
    identified = IdentifiedSet(points=points, betatilde=est.params.betatilde, omega=est.params.Omega,
                               grid=np.array([0.0, 0.5]))
    req = IRFRequest(draws=20, seed=2)
    frame = irf_timeline(identified, est, small_dataset, None, horizons=(0, 2), req=req,
                         dates=["2000Q3", "2001Q1"], workers=1)
    assert len(frame) == 2 * 2 * 2
    assert (frame["lo"] <= frame["hi"]).all()
    assert frame.loc[frame["variable"] == "y1", "cumulative"].all()
    assert not frame.loc[frame["variable"] == "i", "cumulative"].any()

    point_req = req.model_copy(update={"horizon": 2, "date": "2001Q1"})
    cumulated = [np.cumsum(girf(pt, est, small_dataset, None, point_req).response[:, 0]) for pt in points]
    row = frame[(frame["date"] == "2001Q1") & (frame["variable"] == "y1") & (frame["horizon"] == 2)].iloc[0]
    assert row["lo"] == pytest.approx(min(c[2] for c in cumulated))
    assert row["hi"] == pytest.approx(max(c[2] for c in cumulated))


@pytest.mark.slow
def test_bootstrap_bands_bracket_the_point_response():
    s = make_structural()
    data = simulate(s, ModelSpec(p=1), T=120, seed=5).dataset
    est = _estimate(s)
    req = IRFRequest(horizon=4, draws=40, seed=2)
    options = FitOptions(n_starts=1, seed=0, warmup_iter=100, maxiter=200, covariance="none", workers=1)
    bands = bootstrap_girf_bands(_point(), est, data, req, n_boot=20, options=options, level=0.95)
    point = girf(_point(), est, data, None, req)
    assert_allclose(bands.response, point.response)
    assert np.all(bands.lower <= bands.response + 1e-12)
    assert np.all(bands.response <= bands.upper + 1e-12)
    assert "parametric bootstrap" in bands.notes[0]

    again = bootstrap_girf_bands(_point(), est, data, req, n_boot=20, options=options, level=0.95)
    assert_allclose(again.lower, bands.lower)
    assert_allclose(again.upper, bands.upper)
