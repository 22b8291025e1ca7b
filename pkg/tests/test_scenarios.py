import numpy as np
import pytest
from numpy.testing import assert_allclose

from app.DSGE.scenarios import Scenario, load_scenario, run_scenario
from app.errors import ConfigValidationError


def test_bundled_scenarios_load():
    paths = load_scenario("demand_shock_paths")
    assert paths.scenario_kind == "paths"
    assert paths.xi_grid == [0.0, 0.5, 1.0]
    assert paths.demand_shock is None
    assert paths.demand_shock_periods == [6, 7]
    assert paths.params(0.5).b == pytest.approx(-0.01 / 1.01)

    girf = load_scenario("policy_shock_at_elb")
    assert girf.scenario_kind == "girf"
    assert girf.methods == ["piecewise", "occbin"]
    assert girf.severity == 1.5
    assert girf.policy_shock == -0.25


def test_unknown_scenario():
    with pytest.raises(ConfigValidationError) as info:
        load_scenario("no_such_scenario")
    assert "demand_shock_paths" in info.value.problems[0]


def test_scenario_file_with_calibration(tmp_path):
    path = tmp_path / "steep.env"
    path.write_text("SCENARIO_KIND=paths\nXI_GRID=0,1\nPERIODS=12\nDEMAND_SHOCK_PERIODS=2\nCAL_KAPPA=0.1\n")
    scenario = load_scenario(path)
    assert scenario.name == "steep"
    assert scenario.params(1.0).kappa == 0.1

    path.write_text("XI_GRID=0,1.5\nCAL_LAMBDA_STAR=0.5\n")
    with pytest.raises(ConfigValidationError):
        load_scenario(path)


def test_xi_grid_limited_by_alpha():
    with pytest.raises(ValueError):
        Scenario(name="x", xi_grid=[1.5])
    scenario = Scenario(name="x", xi_grid=[1.5], alpha=1.0)
    params = scenario.params(1.5)
    assert params.lambda_star == pytest.approx(0.75)
    assert params.xi_star == pytest.approx(1.5)


def test_demand_shock_periods_inside_the_path():
    with pytest.raises(ValueError):
        Scenario(name="x", periods=5, demand_shock_periods=[6])


def test_paths_scenario():
    scenario = load_scenario("demand_shock_paths")
    result = run_scenario(scenario, {"xi_grid": [0.0, 1.0]}, workers=1)
    frame = result.frame
    assert list(frame["case"].unique()) == ["xi=0", "xi=1", "no ELB"]
    assert len(frame) == 3 * scenario.periods
    cases = {case: group.reset_index(drop=True) for case, group in frame.groupby("case")}
    assert cases["xi=0"]["elb"].sum() >= scenario.min_spell
    assert not cases["no ELB"]["elb"].any()
    assert_allclose(cases["xi=1"]["y"], cases["no ELB"]["y"], atol=1e-10)
    assert_allclose(cases["xi=1"]["pi"], cases["no ELB"]["pi"], atol=1e-10)
    # UMP softens the recession
    assert cases["xi=0"]["y"].min() < cases["xi=1"]["y"].min()
    assert result.demand_shock != 0.0
    assert np.isnan(cases["no ELB"]["xi"]).all()


def test_overrides_are_validated():
    scenario = load_scenario("demand_shock_paths")
    with pytest.raises(ConfigValidationError):
        run_scenario(scenario, {"xi_grid": [2.0]})


def test_scenario_aliases():
    assert load_scenario("figure1") == load_scenario("demand_shock_paths")
    assert load_scenario("figure2").name == "policy_shock_at_elb"
    assert Scenario(name="x", methods="prop2,occbin").methods == ["piecewise", "occbin"]
