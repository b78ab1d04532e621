import math

import numpy as np
import pytest

from levicav import dynamics, experiments as E
from levicav.params import ANTINODE, MBAR, NODE, SLOPE, TWO_PI


def _pressure_plan(calibrated, **kw):
    vals = np.logspace(-5, 1, 7) * MBAR
    return E.SweepPlan("pressure", vals, calibrated, **kw)


# plans --------------------------------------------------------------------------

def test_plan_rejects_non_monotone(calibrated):
    with pytest.raises(ValueError, match="monotone"):
        E.SweepPlan("pressure", [1.0, 3.0, 2.0], calibrated)


def test_plan_rejects_unknown_variable_and_mode(calibrated):
    with pytest.raises(ValueError):
        E.SweepPlan("temperature", [1.0], calibrated)
    with pytest.raises(ValueError):
        E.SweepPlan("pressure", [1.0], calibrated, mode="magic")


def test_pressure_sweep_needs_three_decades(calibrated):
    plan = E.SweepPlan("pressure", np.logspace(-3, -1, 5) * MBAR, calibrated)
    with pytest.raises(ValueError, match="three decades"):
        E.run_pressure_sweep(plan)


def test_empty_grid_writes_headers(calibrated, tmp_path):
    res = E.run_detuning_sweep(E.SweepPlan("detuning", [], calibrated))
    assert res.points == []
    E.emit_report(res, tmp_path)
    assert (tmp_path / "fig4abc_temperatures.csv").read_text() == \
        "detuning_hz,phase_rad,axis,temperature_K\n"


# pressure sweep ----------------------------------------------------------------

def test_pressure_sweep_ordering_and_limits(calibrated):
    res = E.run_pressure_sweep(_pressure_plan(calibrated))
    assert len(res.points) == 7 * 3
    assert [p.phase for p in res.points[:7]] == [NODE] * 7
    for phase in (NODE, SLOPE, ANTINODE):
        p, T = res.temperatures("y", phase)
        # gas-dominated limit: all phases near room temperature at high pressure
        assert T[-1] > 250
    # cooled axis warms with pressure; uncooled axis is noise-heated at low pressure
    assert np.all(np.diff(res.temperatures("y", NODE)[1]) > 0)
    assert res.temperatures("y", ANTINODE)[1][0] > 300
    _, Tz_node = res.temperatures("z", NODE)
    _, Tz_anti = res.temperatures("z", ANTINODE)
    p, _ = res.temperatures("z", NODE)
    low = p < 1e-2 * MBAR
    assert np.all(Tz_anti[low] < Tz_node[low])


def test_oracle_sweep_deterministic(calibrated):
    a = E.run_pressure_sweep(_pressure_plan(calibrated))
    b = E.run_pressure_sweep(_pressure_plan(calibrated))
    for p, q in zip(a.points, b.points):
        np.testing.assert_array_equal(p.temperature, q.temperature)


def test_trajectory_point_matches_oracle(calibrated):
    plan = E.SweepPlan("pressure", [3e-2 * MBAR], calibrated, phases=(NODE,),
                       mode="trajectory", duration=0.5, dt=2e-6, seed=4)
    pt = E.evaluate_point(plan, 0, plan.values[0], NODE)
    np.testing.assert_allclose(pt.temperature[:2], pt.oracle_temperature[:2], rtol=0.2)


def test_trajectory_point_reproducible(calibrated):
    plan = E.SweepPlan("pressure", [1.0 * MBAR], calibrated, phases=(NODE,),
                       mode="trajectory", duration=0.02, dt=2e-6, seed=9)
    a = E.evaluate_point(plan, 0, plan.values[0], NODE)
    b = E.evaluate_point(plan, 0, plan.values[0], NODE)
    np.testing.assert_array_equal(a.temperature, b.temperature)


# detuning and power -------------------------------------------------------------

def test_negative_detuning_loses_particle(calibrated):
    res = E.run_detuning_sweep(E.SweepPlan("detuning", [-TWO_PI * 4e5, TWO_PI * 4e5],
                                           calibrated, phases=(NODE,)))
    lost, kept = res.points
    assert not lost.stable and lost.temperature is None
    assert kept.stable and kept.temperature is not None


def test_far_detuning_approaches_cavity_free(calibrated):
    res = E.run_detuning_sweep(E.SweepPlan("detuning", [TWO_PI * 20e6], calibrated,
                                           phases=(NODE,)))
    free = dynamics.steady_state_temperatures(
        dynamics.build_linear_model(calibrated.with_(g0=0.0)))
    np.testing.assert_allclose(res.points[0].temperature, free, rtol=0.05)


def test_power_sweep_best_phases(calibrated, tmp_path):
    res = E.run_power_sweep(E.SweepPlan("power", [0.3, 0.4, 0.5], calibrated))
    assert res.provenance["best_phase"] == E.BEST_PHASE
    assert {p.phase for p in res.points} == {NODE, ANTINODE}
    _, Ty = E.power_curve(res, "y")
    assert np.all(np.diff(Ty) < 0)
    E.emit_report(res, tmp_path)
    lines = (tmp_path / "fig4d_temperatures.csv").read_text().splitlines()
    assert len(lines) == 1 + 3 * 3


def test_nonlinear_coefficients_positive(calibrated):
    c = E.nonlinear_broadening_coefficients(calibrated)
    assert np.all(c > 0)
    # linear in 1/m at fixed trap
    heavy = calibrated.with_(density=2 * calibrated.particle.density)
    np.testing.assert_allclose(E.nonlinear_broadening_coefficients(heavy), c / 2, rtol=1e-12)


# relaxation ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_relaxation(calibrated):
    plan = E.RelaxationPlan(system=calibrated.with_(pressure=3e-3 * MBAR), phases=(NODE,),
                            ensemble=24, duration=0.01, pre_duration=0.002, dt=2e-6,
                            seed=5, batch=8)
    return plan, E.run_relaxation_ensemble(plan, "cooling_on")[0]


def test_relaxation_baseline_before_switch(small_relaxation):
    plan, s = small_relaxation
    t, T = s.t["y"], s.temperature["y"]
    assert t[0] < 0
    pre = t + s.window["y"] / 2 <= 0
    assert pre.any()
    # before the switch the ensemble sits at the uncooled steady state
    assert np.mean(T[pre]) == pytest.approx(s.baseline["y"], rel=0.35)
    assert T[-1] < 0.2 * s.baseline["y"]


def test_relaxation_fit_rate(small_relaxation):
    _, s = small_relaxation
    f = s.fits["y"]
    assert f is not None
    assert f["rate"] == pytest.approx(s.expected_rate["y"], rel=0.3)


def test_relaxation_deterministic(calibrated):
    plan = E.RelaxationPlan(system=calibrated, phases=(NODE,), ensemble=2, duration=0.002,
                            pre_duration=0.001, dt=2e-6, seed=1)
    a = E.run_relaxation_ensemble(plan, "cooling_off")[0]
    b = E.run_relaxation_ensemble(plan, "cooling_off")[0]
    np.testing.assert_array_equal(a.temperature["x"], b.temperature["x"])


def test_relaxation_bad_direction(calibrated):
    with pytest.raises(ValueError):
        E.run_relaxation_ensemble(E.RelaxationPlan(system=calibrated, ensemble=1), "sideways")


def test_cooled_pairs(calibrated):
    pairs = E.cooled_pairs(E.RelaxationPlan(system=calibrated))
    assert (NODE, "y") in pairs and (ANTINODE, "z") in pairs
    assert (NODE, "z") not in pairs and (ANTINODE, "y") not in pairs


def test_relaxation_report(small_relaxation, tmp_path):
    _, s = small_relaxation
    E.emit_report({"cooling_on": [s]}, tmp_path, subcommand="relaxation", seed=5)
    head = (tmp_path / "fig3_fits.csv").read_text().splitlines()[0]
    assert head.startswith("direction,phase_rad,axis,rate_per_s")
    import json
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["outputs"] == ["fig3_cooling_on.csv", "fig3_fits.csv"]
    assert man["seed"] == 5
