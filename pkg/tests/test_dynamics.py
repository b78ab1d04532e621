import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, linalg, signal

from levicav import dynamics as D
from levicav.params import HBAR, K_B, MBAR, TWO_PI, InstabilityError


def kron_lyapunov(M, Dm):
    """Independent stationary covariance: (I kron M + M kron I) vec C = -vec D."""
    n = M.shape[0]
    K = np.kron(np.eye(n), M) + np.kron(M, np.eye(n))
    return np.linalg.solve(K, -Dm.reshape(-1)).reshape(n, n)


def _temperature(C, omega):
    return np.array([HBAR * omega[i] * (C[2 + 2 * i, 2 + 2 * i] + C[3 + 2 * i, 3 + 2 * i]) / (2 * K_B)
                     for i in range(3)])


@pytest.fixture(scope="module")
def model(calibrated):
    return D.build_linear_model(calibrated.with_(pressure=3e-2 * MBAR))


# model structure ---------------------------------------------------------------

def test_drift_structure(defaults):
    m = D.build_linear_model(defaults)
    M = m.drift
    g = defaults.couplings
    assert M[0, 0] == M[1, 1] == -defaults.kappa / 2
    assert M[0, 1] == -M[1, 0] == defaults.detuning
    for i in range(3):
        q, p = 2 + 2 * i, 3 + 2 * i
        assert M[1, q] == M[p, 0] == -2 * g[i]
        assert M[q, p] == -M[p, q] == defaults.omega[i]
        assert M[p, p] == -defaults.gamma_gas
    assert np.all(np.linalg.eigvalsh(m.diffusion) >= 0)


def test_rejects_bad_diffusion(model):
    bad = model.diffusion.copy()
    bad[2, 3] = 1.0
    with pytest.raises(ValueError):
        model.with_diffusion(bad)


# Lyapunov oracle -------------------------------------------------------------------

@pytest.mark.parametrize("phase", ["node", "slope", "antinode", 0.3])
@pytest.mark.parametrize("pressure_mbar", [1e-5, 3e-3, 1.0])
def test_lyapunov_matches_kronecker(calibrated, phase, pressure_mbar):
    m = D.build_linear_model(calibrated.with_(phase=phase, pressure=pressure_mbar * MBAR))
    C = D.steady_state_covariance(m)
    np.testing.assert_allclose(C, kron_lyapunov(m.drift, m.diffusion), rtol=1e-6,
                               atol=1e-9 * np.max(np.abs(C)))


def test_cavity_free_limit(defaults):
    sys_ = defaults.with_(g0=0.0)
    m = D.build_linear_model(sys_)
    T = D.steady_state_temperatures(m)
    expected = 300 + HBAR * sys_.omega / (2 * K_B) + sys_.noise_heating / sys_.gamma_gas
    np.testing.assert_allclose(T, expected, rtol=1e-9)


def test_two_bath_weak_coupling(calibrated):
    sys_ = calibrated.with_(noise_heating_ref=(0, 0, 0))
    T = D.steady_state_temperatures(D.build_linear_model(sys_))
    gg, gc = sys_.gamma_gas, sys_.cooling_rates
    two_bath = gg * 300 / (gg + gc[1])
    assert T[1] == pytest.approx(two_bath, rel=0.05)


def test_effective_damping_weak_coupling(calibrated):
    m = D.build_linear_model(calibrated)
    g = D.effective_damping(m)
    assert g[1] == pytest.approx(calibrated.cooling_rates[1] + calibrated.gamma_gas, rel=0.02)
    assert g[2] == pytest.approx(calibrated.gamma_gas, rel=1e-6)
    # x borrows damping from y through the shared cavity mode; without it x is gas-damped only
    g_aligned = D.effective_damping(D.build_linear_model(calibrated.with_(polarization_misalignment=0)))
    assert g_aligned[0] == pytest.approx(calibrated.gamma_gas, rel=1e-6)
    assert g[0] > calibrated.cooling_rates[0] + calibrated.gamma_gas


def test_mean_occupation_consistent(model):
    n = D.mean_occupation(model)
    T = D.steady_state_temperatures(model)
    np.testing.assert_allclose(HBAR * model.omega * (n + 0.5) / K_B, T, rtol=1e-12)


def test_unstable_model_raises(defaults):
    m = D.build_linear_model(defaults.with_(detuning=-defaults.detuning))
    assert not m.is_stable()
    with pytest.raises(InstabilityError, match="particle loss"):
        D.steady_state_covariance(m)


# analytic spectrum -------------------------------------------------------------------

@pytest.mark.parametrize("channel,axis", [("q_y", 1), ("q_z", 2)])
def test_analytic_psd_integrates_to_variance(model, channel, axis):
    C = D.steady_state_covariance(model)
    j = D.LABELS.index(channel)
    f0 = model.omega[axis] / TWO_PI
    width = max(D.effective_damping(model)[axis] / TWO_PI, 1.0)
    pts = [f0 - 20 * width, f0, f0 + 20 * width]
    lo = integrate.quad(lambda f: D.analytic_psd(model, f, channel)[0], 0, pts[0], limit=200)[0]
    mid = integrate.quad(lambda f: D.analytic_psd(model, f, channel)[0], pts[0], pts[2],
                         points=[f0], limit=400)[0]
    hi = integrate.quad(lambda f: D.analytic_psd(model, f, channel)[0], pts[2], np.inf, limit=200)[0]
    assert lo + mid + hi == pytest.approx(C[j, j], rel=1e-3)


# exact discretization -------------------------------------------------------------

@pytest.mark.parametrize("dt", [1e-7, 1e-6, 2e-5, 1e-3])
def test_discretize_exact(model, dt):
    A, L = D.discretize(model, dt)
    np.testing.assert_allclose(A, linalg.expm(model.drift * dt), rtol=1e-9, atol=1e-12)
    C = D.steady_state_covariance(model)
    Q = C - A @ C @ A.T  # stationarity: C = A C A^T + Q
    np.testing.assert_allclose(L @ L.T, Q, rtol=1e-6, atol=1e-8 * np.max(np.abs(C)))


def test_discretize_van_loan_small_step(model):
    dt = 1e-7
    n = 8
    V = np.zeros((2 * n, 2 * n))
    V[:n, :n] = -model.drift
    V[:n, n:] = model.diffusion
    V[n:, n:] = model.drift.T
    E = linalg.expm(V * dt)
    Q = E[n:, n:].T @ E[:n, n:]
    _, L = D.discretize(model, dt)
    np.testing.assert_allclose(L @ L.T, 0.5 * (Q + Q.T), rtol=1e-8, atol=1e-10 * np.max(np.abs(Q)))


def test_sample_state_covariance(model):
    C = D.steady_state_covariance(model)
    x = D.sample_state(C, np.random.default_rng(1), size=200_000)
    np.testing.assert_allclose(np.var(x[:, 4]), C[4, 4], rtol=0.02)


# trajectories ------------------------------------------------------------------------

def test_simulate_deterministic(model):
    a = D.simulate(model, 2e-3, 1e-6, seed=7)
    b = D.simulate(model, 2e-3, 1e-6, seed=7)
    c = D.simulate(model, 2e-3, 1e-6, seed=8)
    np.testing.assert_array_equal(a.samples, b.samples)
    assert not np.array_equal(a.samples, c.samples)
    assert a.samples.shape == (2000, 8)
    assert a.times[0] == pytest.approx(1e-6)


def test_simulate_needs_100_steps(model):
    with pytest.raises(ValueError, match="100 steps"):
        D.simulate(model, 50e-6, 1e-6)


def test_ensemble_members_independent_of_batch(model):
    full = D.simulate_ensemble(model, 1e-3, 1e-6, seed=3, n=4, channels=("q_y",))
    one = D.simulate_ensemble(model, 1e-3, 1e-6, seed=3, n=1, first=2, channels=("q_y",))
    # same generator stream; BLAS may round differently for other batch shapes
    np.testing.assert_allclose(full[2], one[0], rtol=1e-10, atol=1e-9)


def test_propagate_record_every(model):
    A, L = D.discretize(model, 1e-6)
    rng = lambda: [np.random.default_rng(0)]  # noqa: E731
    dense, xd = D.propagate(A, L, np.zeros(8), 1000, rng(), record=[4])
    sparse, xs = D.propagate(A, L, np.zeros(8), 1000, rng(), record=[4], every=10)
    np.testing.assert_array_equal(sparse[0, :, 0], dense[0, 9::10, 0])
    np.testing.assert_array_equal(xd, xs)


def test_divergence_raises(defaults):
    m = D.build_linear_model(defaults.with_(detuning=-defaults.detuning))
    with pytest.raises(InstabilityError, match="particle loss"):
        D.simulate(m, 0.05, 1e-5, bound=1e3)


def test_trajectory_variance_matches_lyapunov(calibrated):
    # heavily damped point so a short ensemble suffices: relative error ~ sqrt(2 / (gamma T))
    m = D.build_linear_model(calibrated.with_(pressure=1.0 * MBAR))
    C = D.steady_state_covariance(m)
    x0 = D.sample_state(C, np.random.default_rng(11), size=16)
    data = np.stack([D.simulate_ensemble(m, 0.05, 5e-6, seed=5, n=1, first=k, x0=x0[k],
                                         channels=("q_x", "p_x", "q_z", "p_z"))[0]
                     for k in range(16)])
    var = np.mean(data**2, axis=(0, 1))
    expected = np.array([C[2, 2], C[3, 3], C[6, 6], C[7, 7]])
    np.testing.assert_allclose(var, expected, rtol=0.05)


def test_to_meters(model):
    tr = D.simulate(model, 1e-3, 1e-6, seed=1, channels=("q_x", "p_x", "q_y"))
    mt = tr.to_meters(model)
    assert mt.labels == ("x", "y")
    xzp = model.zero_point_length()
    np.testing.assert_allclose(mt.channel("y"), tr.channel("q_y") * math.sqrt(2) * xzp[1])


# nonlinear trap ---------------------------------------------------------------------

def test_restoring_force(calibrated):
    nl = D.NonlinearTrapModel.from_system(calibrated)
    m, w, W = calibrated.mass, nl.lengths[1], calibrated.omega[1]
    assert nl.restoring_force(1e-12, "y") == pytest.approx(-m * W**2 * 1e-12, rel=1e-9)
    x = 0.5 * w
    assert nl.restoring_force(x, "y") == pytest.approx(-m * W**2 * x * math.exp(-0.5), rel=1e-12)


def test_default_trap_lengths(defaults):
    wt, _, zr = D.default_trap_lengths(defaults)
    assert wt == pytest.approx(1550e-9 / (math.pi * 0.83))
    assert zr == pytest.approx(math.pi * wt**2 / 1550e-9)


def test_nonlinear_reduces_to_linear_for_wide_trap(model):
    nl = D.NonlinearTrapModel(model, (1.0, 1.0, 1.0))
    dt = 1 / (50 * float(np.max(model.omega)))
    a = D.simulate_nonlinear(nl, 200 * dt, dt, seed=4, channels=("q_y", "q_z"))
    b = D.simulate(model, 200 * dt, dt, seed=4, channels=("q_y", "q_z"))
    np.testing.assert_allclose(a.samples, b.samples, rtol=1e-8, atol=1e-8)


def test_nonlinear_dt_limit(model):
    nl = D.NonlinearTrapModel(model, (1e-6,) * 3)
    with pytest.raises(ValueError, match="exceeds"):
        D.simulate_nonlinear(nl, 1e-3, 1e-7)


@settings(max_examples=4)
@given(st.floats(0.05, 0.2))
def test_gaussian_trap_frequency_shift(defaults, amp):
    # noise-free, undamped oscillation: Duffing shift -3 Omega A^2 / (4 w^2)
    sys_ = defaults.with_(g0=0.0, pressure=0.0, noise_heating_ref=(0, 0, 0))
    lin = D.build_linear_model(sys_).with_diffusion(np.zeros((8, 8)))
    nl = D.NonlinearTrapModel(lin, (1e-6, 1e-6, 1e-6))
    xzp = lin.zero_point_length()[2]
    x0 = np.zeros(8)
    x0[6] = amp * 1e-6 / (math.sqrt(2) * xzp)
    dt = 1 / (50 * float(np.max(lin.omega)))
    tr = D.simulate_nonlinear(nl, 2e-3, dt, x0=x0, channels=("q_z",))
    q = tr.channel("q_z")
    up = np.nonzero((q[:-1] < 0) & (q[1:] >= 0))[0]
    tc = (up + q[up] / (q[up] - q[up + 1])) * dt
    f = (len(tc) - 1) / (tc[-1] - tc[0])
    shift = f / (lin.omega[2] / TWO_PI) - 1
    assert shift == pytest.approx(-3 * amp**2 / 4, rel=0.1)


# switch-off reheating ---------------------------------------------------------------

def test_heating_trajectory():
    t = np.array([0.0, 1e-2, 1e6])
    T = D.heating_trajectory(t, 1.0, 20.0, 300.0, 40.0)
    assert T[0] == pytest.approx(1.0)
    assert T[-1] == pytest.approx(302.0)
    assert T[1] == pytest.approx(302 - 301 * math.exp(-0.2))
    np.testing.assert_allclose(D.heating_trajectory(t[:2], 1.0, 0.0, 300, 5.0), [1.0, 1.05])


def test_thermal_state_covariance(model):
    C = D.thermal_state_covariance(model, 300.0)
    n = K_B * 300 / (HBAR * model.omega)
    np.testing.assert_allclose(np.diag(C)[2::2], n)
    assert C[0, 0] == C[1, 1] == 0.5


def test_welch_of_trajectory_matches_analytic(model):
    tr = D.simulate(model, 0.2, 1e-6, seed=2, channels=("q_y",),
                    x0=D.sample_state(D.steady_state_covariance(model), np.random.default_rng(0)))
    f, p = signal.welch(tr.channel("q_y"), fs=1e6, nperseg=2**13)
    sel = (f > 120e3) & (f < 160e3)
    ratio = np.sum(p[sel]) / np.sum(D.analytic_psd(model, f[sel], "q_y"))
    assert ratio == pytest.approx(1.0, rel=0.1)


def test_nonlinear_matches_linear_when_cold(defaults):
    # below 1 mK the anharmonic correction is ~1e-7 of the restoring force
    sys_ = defaults.with_(g0=0.0, pressure=1e-4 * MBAR, noise_heating_ref=(0, 0, 0),
                          gas_temperature=1e-4)
    lin = D.build_linear_model(sys_)
    nl = D.NonlinearTrapModel.from_system(sys_)
    cov = D.thermal_state_covariance(lin, 5e-4)
    x0 = D.sample_state(cov, np.random.default_rng(9), size=64)
    dt = 1 / (50 * float(np.max(lin.omega)))
    a = D.simulate_nonlinear(nl, 400 * dt, dt, seed=1, x0=x0, n=64, channels=("q_x", "q_y", "q_z"))
    b = D.simulate_ensemble(lin, 400 * dt, dt, 1, 64, x0=x0, channels=("q_x", "q_y", "q_z"))
    va, vb = np.var(a[:, -1], axis=0), np.var(b[:, -1], axis=0)
    se = vb * math.sqrt(2 / 64)
    assert np.all(np.abs(va - vb) < 2 * se)


def test_hot_gaussian_trap_broadens_peak(defaults):
    from levicav import analysis
    sys_ = defaults.with_(g0=0.0, pressure=1e-4 * MBAR, noise_heating_ref=(0, 0, 0))
    lin = D.build_linear_model(sys_)
    nl = D.NonlinearTrapModel.from_system(sys_)
    x0 = D.sample_state(D.thermal_state_covariance(lin, 300.0), np.random.default_rng(2), size=32)
    dt = 1 / (50 * float(np.max(lin.omega)))
    n = 2**18
    q = D.simulate_nonlinear(nl, n * dt, dt, seed=3, x0=x0, n=32, channels=("q_y",))[:, :, 0]
    spectra = [analysis.welch_psd(row, dt, 2**17) for row in q]
    sp = analysis.Spectrum(spectra[0].freqs, np.mean([s.psd for s in spectra], axis=0),
                           spectra[0].rbw, 32, "1/Hz")
    f0 = lin.omega[1] / TWO_PI
    width = analysis.measure_peak_width(sp, band=(0.9 * f0, 1.1 * f0)).fwhm_lorentz
    linear_width = D.effective_damping(lin)[1] / TWO_PI
    assert width > 100 * linear_width
