"""Measurement pipeline: spectra, calibration, temperatures, linewidths, fits."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, signal

from .params import K_B, TWO_PI


class AnalysisError(ValueError):
    """Input data cannot support the requested estimate."""


class UnidentifiableError(AnalysisError):
    """A fit parameter is not constrained by the data."""


# --------------------------------------------------------------------------
# spectra

@dataclass
class Spectrum:
    freqs: np.ndarray        # Hz, one-sided, uniform
    psd: np.ndarray          # signal^2 / Hz
    rbw: float               # equivalent noise bandwidth of the window, Hz
    n_segments: int = 1
    units: str = "1"

    def __post_init__(self):
        self.freqs = np.asarray(self.freqs, dtype=float)
        self.psd = np.asarray(self.psd, dtype=float)
        if self.freqs.shape != self.psd.shape or self.freqs.ndim != 1:
            raise ValueError("freqs and psd must be 1-D arrays of equal length")
        if np.any(self.psd < 0):
            raise ValueError("PSD values must be non-negative")

    @property
    def df(self) -> float:
        return float(self.freqs[1] - self.freqs[0])

    def area(self, band=None) -> float:
        """Integral of the PSD over ``band`` (Hz) or the whole grid."""
        if band is None:
            return float(np.sum(self.psd) * self.df)
        lo, hi = band
        if lo < self.freqs[0] - 0.5 * self.df or hi > self.freqs[-1] + 0.5 * self.df:
            raise AnalysisError(
                f"band [{lo:g}, {hi:g}] Hz is clipped by the grid [{self.freqs[0]:g}, {self.freqs[-1]:g}] Hz"
            )
        sel = (self.freqs >= lo) & (self.freqs <= hi)
        return float(np.sum(self.psd[sel]) * self.df)


def welch_psd(x, dt: float, segment_length: int, overlap: float = 0.5,
              window: str = "hann", units: str = "1", detrend="constant") -> Spectrum:
    """One-sided Welch estimate with density scaling (area equals variance).

    ``detrend=False`` keeps each segment's mean, for records known to be
    zero-mean (the default removes it, as for measured data).
    """
    x = np.asarray(x, dtype=float)
    if not 0 <= overlap < 1:
        raise ValueError(f"overlap fraction must lie in [0, 1), got {overlap!r}")
    if segment_length > x.shape[-1]:
        raise AnalysisError(
            f"trace has {x.shape[-1]} samples; need at least segment_length={segment_length}"
        )
    noverlap = int(round(overlap * segment_length))
    f, p = signal.welch(x, fs=1.0 / dt, window=window, nperseg=segment_length,
                        noverlap=noverlap, detrend=detrend, scaling="density")
    w = signal.get_window(window, segment_length)
    rbw = (1.0 / dt) * np.sum(w**2) / np.sum(w) ** 2
    n_seg = 1 + (x.shape[-1] - segment_length) // (segment_length - noverlap)
    return Spectrum(f, p, rbw, n_seg, units)


def trace_psd(trace, channel, segment_length, **kw) -> Spectrum:
    return welch_psd(trace.channel(channel), trace.dt, segment_length, **kw)


@dataclass(frozen=True)
class CalibrationFactor:
    c_cal: float             # m per signal unit
    t_ref: float

    def __post_init__(self):
        if not self.c_cal > 0:
            raise ValueError("calibration factor must be positive")

    def apply(self, x):
        return self.c_cal * np.asarray(x)


def calibrate_equipartition(x, t_ref: float, mass: float, omega: float) -> CalibrationFactor:
    """Volts-to-meters factor from a trace recorded at a known temperature."""
    rms = float(np.std(np.asarray(x, dtype=float)))
    if rms == 0:
        raise AnalysisError("calibration trace has zero variance")
    return CalibrationFactor(math.sqrt(K_B * t_ref / (mass * omega**2)) / rms, t_ref)


def temperature_from_area(spectrum: Spectrum, mass: float, omega: float, band=None) -> float:
    """T = m Omega^2 (area under the displacement peak) / k_B."""
    if band is None:
        k = int(np.argmax(spectrum.psd))
        if k < 2 or k > len(spectrum.psd) - 3:
            raise AnalysisError("mechanical peak sits on the edge of the frequency grid")
    return mass * omega**2 * spectrum.area(band) / K_B


# --------------------------------------------------------------------------
# closed-form models

def two_bath_temperature(gamma_gas, gamma_c, gas_temperature, noise_heating=0.0):
    """Steady state of gas bath + cold cavity bath + technical heating."""
    total = np.asarray(gamma_gas) + np.asarray(gamma_c)
    if np.any(total <= 0):
        raise AnalysisError("gamma_gas + gamma_c must be positive")
    return (np.asarray(gamma_gas) * gas_temperature + np.asarray(noise_heating)) / total


def damping_model(gamma_nl, gamma_gas, gamma_c):
    """Linewidth with nonlinear broadening added in quadrature."""
    return np.hypot(gamma_nl, np.asarray(gamma_gas) + np.asarray(gamma_c))


def lorentzian(f, amplitude, center, fwhm, offset=0.0):
    u = 2 * (np.asarray(f) - center) / fwhm
    return amplitude / (1 + u * u) + offset


def bounded_exponential(t, t0, t_inf, rate):
    return t_inf + (t0 - t_inf) * np.exp(-rate * np.asarray(t))


# --------------------------------------------------------------------------
# least squares plumbing

@dataclass
class FitResult:
    names: tuple
    values: np.ndarray
    errors: np.ndarray
    units: tuple
    rss: float
    converged: bool
    iterations: int
    grad_norm: float = 0.0
    message: str = ""
    extra: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return float(self.values[self.names.index(name)])

    def error(self, name):
        return float(self.errors[self.names.index(name)])

    def as_dict(self) -> dict:
        return {
            "parameters": [
                {"name": n, "value": float(v), "stderr": float(e), "unit": u}
                for n, v, e, u in zip(self.names, self.values, self.errors, self.units)
            ],
            "converged": bool(self.converged),
            "residual_norm": float(math.sqrt(self.rss)),
            "rss": float(self.rss),
            "iterations": int(self.iterations),
            "gradient_norm": float(self.grad_norm),
            "message": self.message,
        }


MAX_ITER = 200
XTOL = 1e-9
GTOL = 1e-12


def _least_squares(fun, jac, theta0, n_params):
    """Levenberg-Marquardt on log/linear parameters; returns (sol, cov)."""
    sol = optimize.least_squares(
        fun, theta0, jac=jac, method="lm", xtol=XTOL, ftol=1e-15, gtol=GTOL,
        max_nfev=MAX_ITER * (n_params + 1),
    )
    J = sol.jac
    dof = max(len(sol.fun) - n_params, 1)
    s2 = float(sol.fun @ sol.fun) / dof
    try:
        cov = np.linalg.pinv(J.T @ J) * s2
    except np.linalg.LinAlgError:
        cov = np.full((n_params, n_params), np.nan)
    return sol, cov


def _result(names, units, values, errors, sol) -> FitResult:
    grad = sol.jac.T @ sol.fun
    return FitResult(
        tuple(names), np.asarray(values, float), np.abs(np.asarray(errors, float)), tuple(units),
        float(sol.fun @ sol.fun), bool(sol.status > 0), int(sol.nfev),
        float(np.linalg.norm(grad)), str(sol.message),
    )


def fit_lorentzian(freqs, psd, center, fwhm, amplitude=None, offset=0.0) -> FitResult:
    """Fit amplitude / (1 + (2 (f - f0) / w)^2) + offset."""
    f = np.asarray(freqs, float)
    y = np.asarray(psd, float)
    if amplitude is None:
        amplitude = float(np.max(y))
    scale = float(np.max(np.abs(y))) or 1.0
    fs = max(fwhm, 1e-300)

    def unpack(th):
        return math.exp(th[0]), center + th[1] * fs, fs * math.exp(th[2]), th[3] * scale

    def fun(th):
        a, c, w, b = unpack(th)
        return (lorentzian(f, a, c, w, b) - y) / scale

    def jac(th):
        a, c, w, b = unpack(th)
        u = 2 * (f - c) / w
        d = 1 + u * u
        return np.column_stack([
            a / d,
            a * 4 * u / (w * d * d) * fs,
            a * 2 * u * u / (d * d),
            np.full_like(f, scale),
        ]) / scale

    theta0 = np.array([math.log(max(amplitude - offset, 1e-300)), 0.0, 0.0, offset / scale])
    sol, cov = _least_squares(fun, jac, theta0, 4)
    a, c, w, b = unpack(sol.x)
    sd = np.sqrt(np.clip(np.diag(cov), 0, None))
    errors = [a * sd[0], fs * sd[1], w * sd[2], scale * sd[3]]
    return _result(("amplitude", "center", "fwhm", "offset"), ("psd", "Hz", "Hz", "psd"),
                   [a, c, w, b], errors, sol)


@dataclass(frozen=True)
class PeakWidth:
    center: float            # Hz
    fwhm_direct: float       # Hz, interpolated half-maximum crossings
    fwhm_lorentz: float      # Hz, Lorentzian fit seeded by the direct value
    fit: FitResult

    @property
    def gamma(self) -> float:
        return TWO_PI * self.fwhm_lorentz


def _half_max_crossings(f, p, k):
    half = p[k] / 2
    i = k
    while i > 0 and p[i] > half:
        i -= 1
    j = k
    while j < len(p) - 1 and p[j] > half:
        j += 1
    if p[i] > half or p[j] > half:
        raise AnalysisError("peak is clipped by the edge of the frequency grid")
    left = f[i] + (half - p[i]) * (f[i + 1] - f[i]) / (p[i + 1] - p[i])
    right = f[j - 1] + (half - p[j - 1]) * (f[j] - f[j - 1]) / (p[j] - p[j - 1])
    return left, right, j - i - 1


def measure_peak_width(spectrum: Spectrum, band=None, fit_span: float = 3.0) -> PeakWidth:
    """Direct and Lorentzian FWHM of the dominant peak (inside ``band`` if given).

    The direct value comes from interpolated half-maximum crossings. On noisy
    estimates those crossings sit on fluctuations near the top, so the
    Lorentzian fit is seeded by the larger of the direct value and the
    equivalent width (band area over peak height times 2/pi), then refit
    once over ``fit_span`` fitted widths.
    """
    f, p = spectrum.freqs, spectrum.psd
    lo, hi = 0, len(f)
    if band is not None:
        lo = int(np.searchsorted(f, band[0]))
        hi = int(np.searchsorted(f, band[1], side="right"))
    k = lo + int(np.argmax(p[lo:hi]))
    left, right, n_above = _half_max_crossings(f, p, k)
    direct = right - left
    equivalent = 2 / math.pi * float(np.sum(p[lo:hi])) * spectrum.df / p[k]
    seed = max(direct, equivalent)
    if seed < 3 * spectrum.rbw or seed < 5 * spectrum.df:
        raise AnalysisError(
            f"peak under-resolved: FWHM {direct:.3g} Hz spans {n_above} bins with "
            f"resolution bandwidth {spectrum.rbw:.3g} Hz; use a longer trace or segment"
        )
    center = 0.5 * (left + right)
    fit = None
    for _ in range(2):
        sel = np.abs(f - center) <= max(fit_span * seed, 6 * spectrum.df)
        fit = fit_lorentzian(f[sel], p[sel], center, seed, amplitude=p[k], offset=0.0)
        center, seed = fit["center"], fit["fwhm"]
    return PeakWidth(fit["center"], direct, fit["fwhm"], fit)


def fwhm_damping(spectrum: Spectrum, band=None) -> float:
    """Damping rate (rad/s) as 2 pi times the fitted FWHM of the peak."""
    return measure_peak_width(spectrum, band).gamma


# --------------------------------------------------------------------------
# relaxation fits

def fit_bounded_exponential(t, temps, sigma=None) -> FitResult:
    """Fit T(t) = T_inf + (T_0 - T_inf) exp(-rate t) with rate > 0."""
    t = np.asarray(t, float)
    y = np.asarray(temps, float)
    if len(t) < 10:
        raise AnalysisError(f"need at least 10 time points, got {len(t)}")
    spread = np.ptp(y)
    scale = float(np.max(np.abs(y))) or 1.0
    if spread <= 1e-12 * scale:
        raise UnidentifiableError("constant series: relaxation rate is unidentifiable")
    w = np.ones_like(y) if sigma is None else 1.0 / np.asarray(sigma, float)
    w = w / scale

    # initial guess: ends of the series and the 1/e crossing
    t0_guess, tinf_guess = y[0], float(np.mean(y[-max(len(y) // 10, 1):]))
    target = tinf_guess + (t0_guess - tinf_guess) / math.e
    crossed = np.nonzero(np.sign(y - target) != np.sign(t0_guess - target))[0]
    tau = (t[crossed[0]] - t[0]) if len(crossed) and t[crossed[0]] > t[0] else np.ptp(t) / 3
    rate0 = 1.0 / max(tau, 1e-300)
    # work in shifted time so T_0 refers to the first sample; shift back below
    ts = t - t[0]

    def fun(th):
        return (bounded_exponential(ts, th[0], th[1], math.exp(th[2])) - y) * w

    def jac(th):
        r = math.exp(th[2])
        e = np.exp(-r * ts)
        return np.column_stack([e, 1 - e, -(th[0] - th[1]) * ts * r * e]) * w[:, None]

    sol, cov = _least_squares(fun, jac, np.array([t0_guess, tinf_guess, math.log(rate0)]), 3)
    a, b, lr = sol.x
    rate = math.exp(lr)
    step = float(np.min(np.diff(np.unique(t)))) if len(np.unique(t)) > 1 else 0.0
    if rate * np.ptp(t) < 1e-2 or rate * step > 50 or rate * t[0] > 700:
        raise UnidentifiableError(
            f"fitted rate {rate:.3g} 1/s is not resolved by the sampled interval "
            f"(span {np.ptp(t):.3g} s, spacing {step:.3g} s)")
    sd = np.sqrt(np.clip(np.diag(cov), 0, None))
    # T_0 at t = 0 of the caller's clock
    shift = math.exp(rate * t[0])
    t0 = b + (a - b) * shift
    res = _result(("T_0", "T_inf", "rate"), ("K", "K", "1/s"), [t0, b, rate],
                  [sd[0] * shift, sd[1], rate * sd[2]], sol)
    return res


# --------------------------------------------------------------------------
# joint pressure-sweep fit

def _sweep_model(theta, p, axes, t_gas, nonlinear):
    # clip so trial steps of the optimizer cannot overflow
    theta = np.clip(theta, -300.0, 300.0)
    s = math.exp(theta[0])
    out_T, out_g, jT, jg = [], [], [], []
    n = len(theta)
    per = 3 if nonlinear else 2
    for a in range(axes):
        base = 1 + per * a
        gc = math.exp(theta[base])
        tn = math.exp(theta[base + 1])
        gg = s * p
        G = gg + gc
        heat = gg * t_gas + tn
        log_T = np.log(heat) - np.log(G)
        dlogT = np.zeros((len(p), n))
        dlogT[:, 0] = gg * t_gas / heat - gg / G
        dlogT[:, base] = -gc / G
        dlogT[:, base + 1] = tn / heat
        dlogG = np.zeros((len(p), n))
        dlogG[:, 0] = gg / G
        dlogG[:, base] = gc / G
        if nonlinear:
            log_cT = theta[base + 2] + log_T
            log_gam = 0.5 * np.logaddexp(2 * log_cT, 2 * np.log(G))
            w_nl = np.exp(2 * (log_cT - log_gam))[:, None]
            dlogcT = dlogT.copy()
            dlogcT[:, base + 2] = 1.0
            jg.append(w_nl * dlogcT + (1 - w_nl) * dlogG)
        else:
            log_gam = np.log(G)
            jg.append(dlogG)
        out_T.append(log_T)
        out_g.append(log_gam)
        jT.append(dlogT)
    return np.concatenate(out_T + out_g), np.vstack(jT + jg)


def fit_pressure_sweep(pressure, temperatures, dampings, gas_temperature=300.0,
                       nonlinear=True) -> FitResult:
    """Joint log-space fit of the two-bath and damping models.

    ``pressure`` in Pa; ``temperatures`` and ``dampings`` are dicts mapping
    axis name to arrays (K and rad/s). Returns the shared gas-damping slope
    (rad/s/Pa) and per-axis cooling rate, heating rate and nonlinear
    broadening coefficient ``c_NL`` (rad/s/K).
    """
    p = np.asarray(pressure, float)
    axes = list(temperatures)
    if len(p) < 6:
        raise AnalysisError(f"need at least 6 pressure points, got {len(p)}")
    if np.log10(p.max() / p.min()) < 3 - 1e-9:
        raise AnalysisError("pressure points must span at least 3 decades")
    T = {a: np.asarray(temperatures[a], float) for a in axes}
    g = {a: np.asarray(dampings[a], float) for a in axes}
    data = np.concatenate([np.log(T[a]) for a in axes] + [np.log(g[a]) for a in axes])

    # seeds: slope from the highest pressures, cooling rate from the floor of
    # the damping curve, heating from the low-pressure temperature floor
    hi = np.argsort(p)[-2:]
    s0 = float(np.median(np.concatenate([g[a][hi] / p[hi] for a in axes])))
    lo = int(np.argmin(p))
    theta0 = [math.log(s0)]
    for a in axes:
        gc0 = max(float(np.min(g[a])) - s0 * p[lo], 1e-3 * float(np.min(g[a])))
        tn0 = max(float(T[a][lo]) * (gc0 + s0 * p[lo]) - s0 * p[lo] * gas_temperature,
                  1e-3 * float(T[a][lo]) * gc0)
        theta0 += [math.log(gc0), math.log(tn0)]
        if nonlinear:
            G = s0 * p + gc0
            excess = np.sqrt(np.clip(g[a] ** 2 - G**2, 0, None)) / T[a]
            c0 = float(np.max(excess)) if np.max(excess) > 0 else 1e-6 * float(np.max(g[a] / T[a]))
            theta0.append(math.log(c0))
    theta0 = np.array(theta0)

    def fun(th):
        return _sweep_model(th, p, len(axes), gas_temperature, nonlinear)[0] - data

    def jac(th):
        return _sweep_model(th, p, len(axes), gas_temperature, nonlinear)[1]

    sol, cov = _least_squares(fun, jac, theta0, len(theta0))
    vals = np.exp(sol.x)
    errs = vals * np.sqrt(np.clip(np.diag(cov), 0, None))
    names, units = ["gamma_gas_slope"], ["rad/s/Pa"]
    for a in axes:
        names += [f"gamma_c_{a}", f"noise_heating_{a}"]
        units += ["rad/s", "K/s"]
        if nonlinear:
            names.append(f"c_nl_{a}")
            units.append("rad/s/K")
    return _result(names, units, vals, errs, sol)


# --------------------------------------------------------------------------
# time-resolved temperatures

def band_filter(x, dt, band):
    """Zero all Fourier components outside ``band`` (Hz) along the last axis."""
    x = np.asarray(x, float)
    X = np.fft.rfft(x, axis=-1)
    f = np.fft.rfftfreq(x.shape[-1], dt)
    X[..., (f < band[0]) | (f > band[1])] = 0
    return np.fft.irfft(X, n=x.shape[-1], axis=-1)


def sliding_temperature(x, dt: float, mass: float, omega: float, window: float,
                        hop: float, band=None, t0: float = 0.0, min_periods: float = 20):
    """Temperature from PSD areas of short, Hann-windowed snapshots.

    ``x`` is a displacement record in m (last axis is time; leading axes are
    kept, e.g. ensemble members). The signal is first band-filtered to
    ``band`` (Hz). For each snapshot the area of its density-scaled periodogram
    equals the window-weighted mean square sum(w^2 x^2) / sum(w^2), which is
    what is evaluated here. Returns ``(t, T)`` with t at window centers.
    """
    period = TWO_PI / omega
    if window < min_periods * period * (1 - 1e-9):
        raise AnalysisError(
            f"window {window:g} s is shorter than {min_periods:g} oscillation periods "
            f"({min_periods * period:g} s)"
        )
    x = np.asarray(x, float)
    n_win = int(round(window / dt))
    n_hop = max(1, int(round(hop / dt)))
    if n_win > x.shape[-1]:
        raise AnalysisError(f"record has {x.shape[-1]} samples, window needs {n_win}")
    if band is not None:
        x = band_filter(x, dt, band)
    w2 = signal.get_window("hann", n_win) ** 2
    w2 /= w2.sum()
    kernel = w2[::-1].reshape((1,) * (x.ndim - 1) + (n_win,))
    ms = signal.fftconvolve(x * x, kernel, mode="valid", axes=-1)[..., ::n_hop]
    starts = np.arange(ms.shape[-1]) * n_hop
    t = t0 + (starts + (n_win - 1) / 2) * dt
    return t, mass * omega**2 * ms / K_B
