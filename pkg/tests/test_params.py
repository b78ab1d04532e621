import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from levicav import dynamics
from levicav import params as P
from levicav.params import MBAR, TWO_PI, ParameterError


# closed-form values --------------------------------------------------------

def test_linewidth_from_finesse():
    kappa = P.linewidth_from_finesse(22e3, 6.46e-3)
    assert kappa / TWO_PI == pytest.approx(299792458 / (2 * 22e3 * 6.46e-3), rel=1e-12)
    assert kappa / TWO_PI == pytest.approx(1.0547e6, rel=1e-4)


def test_finesse_linewidth_inverse():
    k = P.linewidth_from_finesse(22e3, 6.46e-3)
    assert P.finesse_from_linewidth(k, 6.46e-3) == pytest.approx(22e3, rel=1e-12)


def test_purcell_and_fraction():
    eta = P.purcell_factor(22e3, 1550e-9, 48e-6)
    assert eta == pytest.approx(6 * 22e3 * 1550e-9**2 / (math.pi**3 * 48e-6**2), rel=1e-12)
    assert eta == pytest.approx(4.4392, rel=1e-4)
    assert P.scattered_fraction(eta) == pytest.approx(eta / (eta + 1), rel=1e-12)
    assert P.scattered_fraction(eta) == pytest.approx(0.81615, rel=1e-4)


def test_min_phonon_number(defaults):
    assert P.min_phonon_number(defaults.kappa, defaults.omega[1]) == pytest.approx(1.8834, rel=1e-4)


def test_mass_and_gas_damping(defaults):
    r = 68e-9
    m = 4 / 3 * math.pi * r**3 * 1850
    assert defaults.mass == pytest.approx(m, rel=1e-12)
    vbar = math.sqrt(8 * 1.380649e-23 * 300 / (math.pi * 28.97 * 1.66053906660e-27))
    assert P.mean_thermal_speed(300, 28.97 * P.AMU) == pytest.approx(vbar, rel=1e-9)
    expected = 15.8 * r**2 * 0.3 / (m * vbar)
    assert defaults.gamma_gas == pytest.approx(expected, rel=1e-9)
    assert defaults.gamma_gas / TWO_PI == pytest.approx(3.0574, rel=1e-4)


def test_gas_damping_linear_in_pressure(defaults):
    g1 = defaults.with_(pressure=1.0).gamma_gas
    g2 = defaults.with_(pressure=7.0).gamma_gas
    assert g2 == pytest.approx(7 * g1, rel=1e-12)
    assert defaults.with_(pressure=0.0).gamma_gas == 0.0


def test_trap_frequencies_scale_with_sqrt_power(defaults):
    w = defaults.with_(power=0.125).omega
    np.testing.assert_allclose(w, 0.5 * defaults.omega, rtol=1e-12)


# couplings and rates ---------------------------------------------------------

def test_couplings_at_named_phases(defaults):
    g0 = defaults.coupling.g0
    np.testing.assert_allclose(defaults.with_(phase="node").couplings, [0.15 * g0, g0, 0],
                               atol=1e-9 * g0)
    np.testing.assert_allclose(defaults.with_(phase="antinode").couplings, [0, 0, g0],
                               atol=1e-9 * g0)
    s = math.sqrt(0.5)
    np.testing.assert_allclose(defaults.with_(phase="slope").couplings,
                               [0.15 * g0 * s, g0 * s, g0 * s], rtol=1e-12)


def test_couplings_scale_with_sqrt_power(defaults):
    np.testing.assert_allclose(defaults.with_(power=0.125).couplings, 0.5 * defaults.couplings,
                               rtol=1e-12, atol=1e-20)


def test_weak_coupling_rate_default(defaults):
    g, k, w, d = defaults.couplings[1], defaults.kappa, defaults.omega[1], defaults.detuning
    expected = g**2 * k * (1 / ((d - w) ** 2 + k**2 / 4) - 1 / ((d + w) ** 2 + k**2 / 4))
    assert defaults.cooling_rates[1] == pytest.approx(expected, rel=1e-12)
    assert defaults.cooling_rates[1] / TWO_PI == pytest.approx(1306.3, rel=1e-4)


@given(st.floats(1e3, 1e6), st.floats(TWO_PI * 1e4, TWO_PI * 5e7), st.floats(1e4, 1e7))
def test_cooling_rate_sign_follows_detuning(g, delta, omega):
    kappa = TWO_PI * 1e6
    up = P.cavity_cooling_rate(g, delta, kappa, omega, check_stability=False)
    down = P.cavity_cooling_rate(g, -delta, kappa, omega, check_stability=False)
    assert up > 0
    assert down == pytest.approx(-up, rel=1e-9)


def test_cooling_rate_checks_stability():
    with pytest.raises(P.InstabilityError):
        P.cavity_cooling_rate(1e6, 1e3, 1e6, 1e5)


def test_noise_heating_quadratic_in_power(defaults):
    np.testing.assert_allclose(defaults.with_(power=0.25).noise_heating, [8.25, 8.25, 82.5])


@given(st.floats(1.0, 1e4))
def test_calibrate_g0_round_trip(target_hz):
    sys_ = P.SystemParams()
    g0 = P.calibrate_g0(sys_, TWO_PI * target_hz)
    assert sys_.with_(g0=g0).cooling_rates[1] == pytest.approx(TWO_PI * target_hz, rel=1e-10)


def test_calibrated_g0_value(defaults):
    assert P.calibrate_g0(defaults, TWO_PI * 1.3e3) / TWO_PI == pytest.approx(32919.95, rel=1e-6)


def test_calibrate_rejects_uncooled_axis(defaults):
    with pytest.raises(ParameterError):
        P.calibrate_g0(defaults, 1.0, axis="z", phase="node")


# phases -----------------------------------------------------------------------

@given(st.floats(-50, 50, allow_nan=False))
def test_canonical_phase_range_and_period(phi):
    c = P.canonical_phase(phi)
    assert 0 <= c < math.pi
    d = P.canonical_phase(phi + math.pi)
    assert min(abs(c - d), math.pi - abs(c - d)) < 1e-9


def test_named_phases():
    assert P.canonical_phase("node") == pytest.approx(math.pi / 2)
    assert P.canonical_phase("antinode") == 0.0
    with pytest.raises(ParameterError):
        P.canonical_phase("trough")


# stability --------------------------------------------------------------------

def test_predicate_basic():
    assert P.is_dynamically_stable([1.0, 2.0, 0.0], 10.0, [1.0, 1.0, 1.0])
    assert not P.is_dynamically_stable([1.0, 4.0, 0.0], 10.0, [1.0, 1.0, 1.0])
    assert P.is_dynamically_stable([0.0, 0.0, 0.0], 0.0, [1.0, 1.0, 1.0])


def test_static_threshold_formula():
    d, k, w = 3.0, 2.0, 0.5
    assert P.static_instability_threshold(d, k, w) == pytest.approx(w * (9 + 1) / 12)
    assert np.isinf(P.static_instability_threshold(-1.0, k, w))


def _single_axis(defaults, g0, delta):
    return defaults.with_(polarization_misalignment=0.0, phase="node", g0=g0, detuning=delta,
                          pressure=1e-1 * MBAR, noise_heating_ref=(0, 0, 0))


@given(st.floats(0.05e6, 20e6), st.floats(0.5, 2.0))
def test_eigenvalues_follow_static_threshold(defaults, delta_hz, ratio):
    delta = TWO_PI * delta_hz
    g2 = P.static_instability_threshold(delta, defaults.kappa, defaults.omega[1])
    if abs(ratio - 1) < 0.01:
        return
    model = dynamics.build_linear_model(_single_axis(defaults, math.sqrt(ratio * g2), delta))
    assert model.is_stable() == (ratio < 1)


# parameter containers -----------------------------------------------------------

def test_with_routes_to_owner(defaults):
    s = defaults.with_(pressure=1.0, phase=0.0, diameter=100e-9, power=0.3)
    assert s.environment.pressure == 1.0
    assert s.coupling.phase == 0.0
    assert s.particle.diameter == 100e-9
    assert s.tweezer.power == 0.3
    assert defaults.environment.pressure == 3e-3 * MBAR


def test_with_recomputes_linewidth(defaults):
    s = defaults.with_(finesse=11e3)
    assert s.kappa == pytest.approx(2 * defaults.kappa, rel=1e-12)
    t = defaults.with_(kappa=TWO_PI * 2e6)
    assert t.cavity.finesse == pytest.approx(P.finesse_from_linewidth(TWO_PI * 2e6, 6.46e-3))


def test_with_unknown_key(defaults):
    with pytest.raises(ParameterError, match="unknown parameter"):
        defaults.with_(temperature=4.0)


@pytest.mark.parametrize("kw", [
    {"pressure": -1.0}, {"diameter": 0.0}, {"numerical_aperture": 1.2}, {"g0": -1.0},
    {"finesse": 0.5}, {"omega_ref": (1.0, 2.0)}, {"noise_heating_ref": (1.0, -1.0, 0.0)},
])
def test_invalid_parameters(defaults, kw):
    with pytest.raises(ParameterError):
        defaults.with_(**kw)


def test_inconsistent_kappa():
    with pytest.raises(ParameterError, match="inconsistent"):
        P.CavityParams(kappa=1.0)


def test_predicate_scalar_coupling_uses_smallest_frequency():
    w = [3.0, 2.0, 1.0]
    assert not P.is_dynamically_stable(1.0, 1.0, w)
    assert P.is_dynamically_stable(0.9, 1.0, w)
    assert P.is_dynamically_stable([1.0, 1.0, 0.0], 1.0, w)


def test_predicate_rejects_nonpositive_frequency():
    with pytest.raises(ParameterError):
        P.is_dynamically_stable(1.0, 1.0, [1.0, 0.0])
