"""Virtual versions of the pressure, relaxation, detuning and power campaigns."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import analysis, dynamics
from .params import (AXES, ANTINODE, HBAR, K_B, MBAR, NODE, SLOPE, TWO_PI, InstabilityError,
                     SystemParams, is_dynamically_stable)

DEFAULT_PHASES = (NODE, SLOPE, ANTINODE)
BEST_PHASE = {"x": NODE, "y": NODE, "z": ANTINODE}
MODES = ("oracle", "trajectory", "nonlinear")


def nonlinear_broadening_coefficients(sys: SystemParams, lengths=None) -> np.ndarray:
    """Default c_NL (rad/s per K) from the Gaussian-trap anharmonicity.

    Softening shifts the frequency by 3 Omega A^2 / (4 w^2); with a thermal
    (exponential) energy distribution the spread of shifts has scale
    3 k_B T / (2 m Omega w^2), whose half-maximum width carries a ln 2.
    """
    lengths = np.asarray(lengths or dynamics.default_trap_lengths(sys))
    return math.log(2) * 3 * K_B / (2 * sys.mass * sys.omega * lengths**2)


@dataclass(frozen=True)
class SweepPlan:
    variable: str                     # pressure | detuning | power | phase
    values: tuple                     # internal units: Pa, rad/s, W, rad
    system: SystemParams = field(default_factory=SystemParams)
    phases: tuple = DEFAULT_PHASES
    mode: str = "oracle"
    duration: float = 0.5
    dt: float = 1e-6
    ensemble: int = 1
    seed: int = 0
    c_nl: tuple | None = None

    def __post_init__(self):
        if self.variable not in ("pressure", "detuning", "power", "phase"):
            raise ValueError(f"unknown sweep variable {self.variable!r}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        vals = tuple(float(v) for v in self.values)
        d = np.diff(vals)
        if len(vals) > 1 and not (np.all(d > 0) or np.all(d < 0)):
            raise ValueError(f"{self.variable} grid must be strictly monotone")
        if self.ensemble < 1:
            raise ValueError("ensemble size must be at least 1")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "phases", tuple(float(p) for p in self.phases))

    def point(self, value, phase) -> SystemParams:
        key = {"pressure": "pressure", "detuning": "detuning", "power": "power",
               "phase": "phase"}[self.variable]
        sys = self.system.with_(phase=phase)
        return sys.with_(**{key: value})

    def nl_coefficients(self, sys) -> np.ndarray:
        if self.c_nl is not None:
            return np.asarray(self.c_nl, float)
        return nonlinear_broadening_coefficients(sys)


@dataclass
class SweepPoint:
    value: float
    phase: float
    temperature: np.ndarray | None     # K per axis, None when lost
    damping: np.ndarray | None         # rad/s per axis
    stable: bool                       # eigenvalues of the drift matrix
    criterion_stable: bool             # g^2 < |Delta| Omega
    threshold_ratio: float             # max_i g_i^2 / (|Delta| Omega_i)
    cooling_rate: np.ndarray | None = None
    oracle_temperature: np.ndarray | None = None


@dataclass
class SweepResult:
    variable: str
    points: list
    provenance: dict

    def select(self, phase=None):
        return [p for p in self.points if phase is None or math.isclose(p.phase, phase)]

    def temperatures(self, axis, phase):
        """Grid values and temperatures (NaN for lost points) along one axis."""
        i = AXES.index(axis)
        pts = self.select(phase)
        v = np.array([p.value for p in pts])
        T = np.array([np.nan if p.temperature is None else p.temperature[i] for p in pts])
        return v, T


def _threshold_ratio(sys: SystemParams) -> float:
    g, w = sys.couplings, sys.omega
    delta = abs(sys.detuning)
    if delta == 0:
        return math.inf if np.any(g != 0) else 0.0
    return float(np.max(g**2 / (delta * w)))


@dataclass
class TrajectorySpectra:
    """Ensemble-averaged Welch spectra of one simulated parameter point."""
    displacement: dict      # axis -> Spectrum of x_i in m^2/Hz
    momentum: dict          # axis -> Spectrum of the dimensionless quadrature p_i
    quadrature: dict        # axis -> Spectrum of the dimensionless quadrature q_i
    omega: np.ndarray
    mass: float
    total_time: float

    def temperatures(self) -> np.ndarray:
        """T_i = hbar Omega_i (<q_i^2> + <p_i^2>) / (2 k_B) from PSD areas."""
        return np.array([HBAR * self.omega[i] * (self.quadrature[a].area() + self.momentum[a].area())
                         / (2 * K_B) for i, a in enumerate(AXES)])

    def position_temperatures(self) -> np.ndarray:
        """T_i = m Omega_i^2 <x_i^2> / k_B from displacement PSD areas."""
        return np.array([analysis.temperature_from_area(self.displacement[a], self.mass, self.omega[i])
                         for i, a in enumerate(AXES)])


def simulate_spectra(model, total_time, dt, seed, n_members=1, *, segment_length=None,
                     nonlinear=None, block_steps=65536, burn_in=0.0) -> TrajectorySpectra:
    """Welch spectra of q, p and x per axis, averaged over members and time blocks.

    ``total_time`` is shared between ``n_members`` independent trajectories,
    each starting from its own sample of the linear stationary state (then run
    for ``burn_in`` seconds unrecorded). Blocks are streamed so memory does not
    grow with the simulated time.
    """
    steps = int(round(total_time / (n_members * dt)))
    if steps < 100:
        raise ValueError(f"each member needs at least 100 steps, got {steps}")
    seg = segment_length or min(steps, 4096)
    block = max(seg, (min(block_steps, steps) // seg) * seg)
    A, L = dynamics.discretize(model, dt)
    kick = None if nonlinear is None else nonlinear.kick(dt)
    rngs = [np.random.default_rng([int(seed), m]) for m in range(n_members)]
    cov = dynamics.steady_state_covariance(model)
    x = np.stack([dynamics.sample_state(cov, r) for r in rngs])
    n_burn = int(round(burn_in / dt))
    if n_burn:
        _, x = dynamics.propagate(A, L, x, n_burn, rngs, record=[0], kick=kick)
    xzp = model.zero_point_length()
    acc = np.zeros((6, seg // 2 + 1))
    count, rbw, freqs, done = 0, None, None, 0
    while done + seg <= steps:
        m = min(block, ((steps - done) // seg) * seg)
        rec, x = dynamics.propagate(A, L, x, m, rngs, record=[2, 3, 4, 5, 6, 7], kick=kick)
        for c in range(6):
            for row in rec[:, :, c]:
                sp = analysis.welch_psd(row, dt, seg, overlap=0.0, detrend=False)
                acc[c] += sp.psd * sp.n_segments
                if c == 0:
                    count += sp.n_segments
                rbw, freqs = sp.rbw, sp.freqs
        done += m
    psd = acc / count
    mk = lambda c, units: analysis.Spectrum(freqs, psd[c], rbw, count, units)  # noqa: E731
    return TrajectorySpectra(
        {a: analysis.Spectrum(freqs, psd[2 * i] * 2 * xzp[i] ** 2, rbw, count, "m^2/Hz")
         for i, a in enumerate(AXES)},
        {a: mk(2 * i + 1, "1/Hz") for i, a in enumerate(AXES)},
        {a: mk(2 * i, "1/Hz") for i, a in enumerate(AXES)},
        np.asarray(model.omega), model.mass, n_members * done * dt)


def _trajectory_estimates(model, duration, dt, seed, nonlinear_model=None, n=1):
    """Temperatures from PSD areas and linewidths from PSD FWHM, per axis."""
    steps = int(round(duration / dt))
    seg = max(256, min(steps // 8, 1 << 16))
    spectra = simulate_spectra(model, n * duration, dt, seed, n, segment_length=seg,
                               nonlinear=nonlinear_model)
    T = spectra.position_temperatures()
    gam = np.empty(3)
    for i, a in enumerate(AXES):
        f0 = model.omega[i] / TWO_PI
        try:
            gam[i] = analysis.fwhm_damping(spectra.displacement[a], band=(0.5 * f0, 1.5 * f0))
        except analysis.AnalysisError:
            gam[i] = np.nan
    return T, gam


def evaluate_point(plan: SweepPlan, index: int, value: float, phase: float) -> SweepPoint:
    sys = plan.point(value, phase)
    model = dynamics.build_linear_model(sys)
    stable = model.is_stable()
    crit = is_dynamically_stable(sys.couplings, sys.detuning, sys.omega)
    ratio = _threshold_ratio(sys)
    if not stable:
        return SweepPoint(value, phase, None, None, False, crit, ratio)
    T_oracle = dynamics.steady_state_temperatures(model)
    g_lin = dynamics.effective_damping(model)
    c_nl = plan.nl_coefficients(sys)
    point = SweepPoint(value, phase, T_oracle, analysis.damping_model(c_nl * T_oracle, g_lin, 0.0),
                       True, crit, ratio, sys.cooling_rates, T_oracle)
    if plan.mode == "oracle":
        return point
    seed = int(np.random.SeedSequence([plan.seed, index]).generate_state(1)[0])
    nl = dynamics.NonlinearTrapModel(model, dynamics.default_trap_lengths(sys)) \
        if plan.mode == "nonlinear" else None
    dt = plan.dt if nl is None else min(plan.dt, 1 / (50 * float(np.max(model.omega))))
    T, gam = _trajectory_estimates(model, plan.duration, dt, seed, nl, plan.ensemble)
    point.temperature = T
    if plan.mode == "nonlinear":
        point.damping = gam
    else:
        point.damping = np.where(np.isnan(gam), point.damping, gam)
    return point


def _evaluate(args):
    return evaluate_point(*args)


def _run(plan: SweepPlan, jobs: int = 1, log=None) -> SweepResult:
    tasks = []
    for phase in plan.phases:
        for value in plan.values:
            tasks.append((plan, len(tasks), value, phase))
    if jobs > 1 and plan.mode != "oracle":
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            points = list(ex.map(_evaluate, tasks))
    else:
        points = []
        for t in tasks:
            points.append(_evaluate(t))
            if log:
                p = points[-1]
                _, col, unit = _SWEEP_FILES[plan.variable]
                log(f"{col}={p.value * unit:.6g} phase={p.phase:.4f} stable={p.stable}")
    prov = {"seed": plan.seed, "mode": plan.mode, "duration_s": plan.duration, "dt_s": plan.dt,
            "ensemble": plan.ensemble}
    return SweepResult(plan.variable, points, prov)


def run_pressure_sweep(plan: SweepPlan, jobs: int = 1, log=None) -> SweepResult:
    if plan.variable != "pressure":
        raise ValueError("pressure sweep needs variable='pressure'")
    v = np.asarray(plan.values)
    if len(v) and np.log10(v.max() / v.min()) < 3 - 1e-9:
        raise ValueError("pressure sweep must span at least three decades")
    return _run(plan, jobs, log)


def run_detuning_sweep(plan: SweepPlan, jobs: int = 1, log=None) -> SweepResult:
    if plan.variable != "detuning":
        raise ValueError("detuning sweep needs variable='detuning'")
    return _run(plan, jobs, log)


def run_power_sweep(plan: SweepPlan, jobs: int = 1, log=None) -> SweepResult:
    """Power sweep; each axis is reported at its own best-cooling phase."""
    if plan.variable != "power":
        raise ValueError("power sweep needs variable='power'")
    phases = tuple(sorted(set(BEST_PHASE.values()), reverse=True))
    res = _run(SweepPlan(**{**plan.__dict__, "phases": phases}), jobs, log)
    res.provenance["best_phase"] = dict(BEST_PHASE)
    return res


def power_curve(result: SweepResult, axis: str):
    return result.temperatures(axis, BEST_PHASE[axis])


# --------------------------------------------------------------------------
# relaxation

@dataclass(frozen=True)
class RelaxationPlan:
    system: SystemParams = field(default_factory=lambda: SystemParams().with_(pressure=3e-3 * MBAR))
    phases: tuple = DEFAULT_PHASES
    ensemble: int = 150
    duration: float = 0.2
    pre_duration: float = 0.01
    dt: float = 1e-6
    seed: int = 0
    on_detuning: float = TWO_PI * 400e3
    off_detuning: float = TWO_PI * 20e6
    window_periods: float = 20.0
    hop_fraction: float = 0.125
    band_fwhm: float = 5.0
    batch: int = 16

    def __post_init__(self):
        if self.ensemble < 1:
            raise ValueError("ensemble size must be at least 1")
        object.__setattr__(self, "phases", tuple(float(p) for p in self.phases))


@dataclass
class RelaxationSeries:
    direction: str
    phase: float
    t: dict                 # axis -> times (s), switch at t = 0
    temperature: dict       # axis -> ensemble-mean T (K)
    stderr: dict            # axis -> standard error of the mean (K)
    window: dict            # axis -> snapshot length (s)
    fits: dict              # axis -> FitResult or None
    expected_rate: dict     # axis -> rate the fit should find (1/s)
    cavity_rate: dict       # axis -> cavity cooling rate at the on detuning (1/s)
    gamma_gas: float
    baseline: dict          # axis -> steady-state T before the switch (Lyapunov)


def _relaxation_models(plan, phase, direction):
    sys = plan.system.with_(phase=phase)
    on = dynamics.build_linear_model(sys, detuning=plan.on_detuning)
    off = dynamics.build_linear_model(sys, detuning=plan.off_detuning)
    if direction == "cooling_on":
        return sys, off, on
    if direction == "cooling_off":
        return sys, on, off
    raise ValueError(f"direction must be cooling_on or cooling_off, got {direction!r}")


def run_relaxation_ensemble(plan: RelaxationPlan, direction: str, log=None, jobs: int = 1):
    """Ensemble-averaged temperature series around a detuning switch at t = 0.

    Each member starts from a sample of the pre-switch stationary state, runs
    ``pre_duration`` with the old drift matrix and ``duration`` with the new
    one. Temperatures come from band-filtered snapshot PSD areas.
    """
    args = [(plan, direction, k, phase) for k, phase in enumerate(plan.phases)]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(args))) as ex:
            return list(ex.map(_relaxation_task, args))
    return [_relaxation_phase(*a, log) for a in args]


def _relaxation_task(args):
    return _relaxation_phase(*args)


def _relaxation_phase(plan, direction, k, phase, log=None) -> RelaxationSeries:
    sys, before, after = _relaxation_models(plan, phase, direction)
    for m in (before, after):
        if not m.is_stable():
            raise InstabilityError(f"relaxation model unstable at phase {phase:.3f}: particle loss")
    cov0 = dynamics.steady_state_covariance(before)
    A0, L0 = dynamics.discretize(before, plan.dt)
    A1, L1 = dynamics.discretize(after, plan.dt)
    n_pre = int(round(plan.pre_duration / plan.dt))
    n_post = int(round(plan.duration / plan.dt))
    omega = sys.omega
    xzp = after.zero_point_length()
    g_before = dynamics.effective_damping(before)
    g_after = dynamics.effective_damping(after)
    windows, hops, bands = {}, {}, {}
    for i, a in enumerate(AXES):
        f0 = omega[i] / TWO_PI
        windows[a] = plan.window_periods / f0
        hops[a] = plan.hop_fraction * windows[a]
        half = max(plan.band_fwhm * max(g_before[i], g_after[i]) / TWO_PI, 4.0 / windows[a])
        bands[a] = (max(f0 - half, 0.0), f0 + half)

    sums = {a: 0.0 for a in AXES}
    squares = {a: 0.0 for a in AXES}
    times = {}
    for start in range(0, plan.ensemble, plan.batch):
        members = range(start, min(start + plan.batch, plan.ensemble))
        rngs = [np.random.default_rng([int(plan.seed), k, m]) for m in members]
        x0 = np.stack([dynamics.sample_state(cov0, r) for r in rngs])
        rec = [2, 4, 6]
        pre, x = dynamics.propagate(A0, L0, x0, n_pre, rngs, record=rec)
        post, _ = dynamics.propagate(A1, L1, x, n_post, rngs, record=rec)
        q = np.concatenate([pre, post], axis=1)
        for i, a in enumerate(AXES):
            x_m = q[:, :, i] * math.sqrt(2) * xzp[i]
            t, T = analysis.sliding_temperature(
                x_m, plan.dt, sys.mass, omega[i], windows[a], hops[a], band=bands[a],
                t0=-(n_pre - 1) * plan.dt, min_periods=plan.window_periods)
            times[a] = t
            sums[a] = sums[a] + T.sum(axis=0)
            squares[a] = squares[a] + (T * T).sum(axis=0)
        if log:
            log(f"{direction} phase={phase:.4f} members {members.start}..{members.stop - 1}")

    n = plan.ensemble
    mean = {a: sums[a] / n for a in AXES}
    # standard error of the ensemble mean; snapshot noise scales with T
    sem = {a: np.sqrt(np.clip(squares[a] / n - mean[a] ** 2, 0, None) / max(n - 1, 1))
           for a in AXES}
    base = dynamics.steady_state_temperatures(before)
    fits, expected, cavity = {}, {}, {}
    rates_on = sys.with_(detuning=plan.on_detuning).cooling_rates
    for i, a in enumerate(AXES):
        expected[a] = float(g_after[i])
        cavity[a] = float(rates_on[i])
        sel = times[a] - windows[a] / 2 >= 0
        try:
            sigma = sem[a][sel] if n > 1 and np.all(sem[a][sel] > 0) else None
            fits[a] = analysis.fit_bounded_exponential(times[a][sel], mean[a][sel], sigma)
        except analysis.AnalysisError:
            fits[a] = None
    return RelaxationSeries(direction, phase, times, mean, sem, windows, fits, expected, cavity,
                            sys.gamma_gas, dict(zip(AXES, base)))


def cooled_pairs(plan: RelaxationPlan, min_ratio: float = 1.0):
    """(phase, axis) pairs where the on-detuning cooling rate exceeds min_ratio * gamma_gas."""
    out = []
    for phase in plan.phases:
        sys = plan.system.with_(phase=phase, detuning=plan.on_detuning)
        for i, a in enumerate(AXES):
            if sys.cooling_rates[i] >= min_ratio * sys.gamma_gas:
                out.append((phase, a))
    return out


# --------------------------------------------------------------------------
# reports

MANIFEST_VERSION = 1
_SWEEP_FILES = {
    "pressure": ("fig2", "pressure_mbar", 1 / MBAR),
    "detuning": ("fig4abc", "detuning_hz", 1 / TWO_PI),
    "power": ("fig4d", "power_w", 1.0),
    "phase": ("phase", "phase_rad", 1.0),
}


def _versions() -> dict:
    import platform

    import scipy

    from . import __version__
    return {"levicav": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _sweep_rows(result: SweepResult, quantity: str, scale: float = 1.0):
    rows = []
    name, _, unit = _SWEEP_FILES[result.variable]
    best = result.provenance.get("best_phase")
    for p in result.points:
        for i, a in enumerate(AXES):
            if best is not None and not math.isclose(best[a], p.phase):
                continue
            v = getattr(p, quantity)
            rows.append([p.value * unit, p.phase, a, None if v is None else float(v[i]) * scale])
    return rows


def _write(path, columns, rows, written):
    from .formats import write_table
    try:
        write_table(path, columns, rows)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc
    written.append(path.name)


def emit_report(result, out_dir, *, subcommand="", config=None, seed=None) -> list:
    """Write CSV tables and ``manifest.json`` for a sweep or relaxation result.

    ``result`` is a SweepResult or a dict ``{direction: [RelaxationSeries]}``.
    CSVs contain no timestamps, so reruns with the same configuration produce
    byte-identical tables.
    """
    import json
    from pathlib import Path

    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror or exc}") from exc
    written = []
    if isinstance(result, SweepResult):
        stem, col, unit = _SWEEP_FILES[result.variable]
        head = [col, "phase_rad", "axis"]
        _write(out / f"{stem}_temperatures.csv", head + ["temperature_K"],
               _sweep_rows(result, "temperature"), written)
        _write(out / f"{stem}_damping.csv", head + ["damping_hz"],
               _sweep_rows(result, "damping", 1 / TWO_PI), written)
        _write(out / f"{stem}_oracle_temperatures.csv", head + ["temperature_K"],
               _sweep_rows(result, "oracle_temperature"), written)
        rows = [[p.value * unit, p.phase, int(p.stable), int(p.criterion_stable),
                 float(p.threshold_ratio)] for p in result.points]
        _write(out / f"{stem}_stability.csv",
               [col, "phase_rad", "stable", "criterion_stable", "threshold_ratio"], rows, written)
    else:
        fit_rows = []
        for direction, series in result.items():
            rows = []
            for s in series:
                for a in AXES:
                    for t, T in zip(s.t[a], s.temperature[a]):
                        rows.append([float(t), s.phase, a, float(T)])
                    f = s.fits[a]
                    fit_rows.append([direction, s.phase, a,
                                     None if f is None else float(f["rate"]),
                                     None if f is None else float(f.error("rate")),
                                     None if f is None else float(f["T_inf"]),
                                     s.expected_rate[a], s.cavity_rate[a], s.gamma_gas,
                                     s.baseline[a]])
            _write(out / f"fig3_{direction}.csv", ["time_s", "phase_rad", "axis", "temperature_K"],
                   rows, written)
        _write(out / "fig3_fits.csv",
               ["direction", "phase_rad", "axis", "rate_per_s", "rate_err_per_s", "t_inf_K",
                "expected_rate_per_s", "cavity_rate_per_s", "gamma_gas_per_s", "baseline_K"],
               fit_rows, written)
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "subcommand": subcommand,
        "config": config,
        "seed": seed,
        "versions": _versions(),
        "outputs": sorted(written),
    }
    path = out / "manifest.json"
    try:
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc
    return written + ["manifest.json"]
