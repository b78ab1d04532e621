"""Physical parameters of the levitated-particle / cavity system.

Everything in here is a pure function of immutable values. Internally all
angular frequencies are in rad/s, pressures in Pa, lengths in m; unit
conversion to Hz / mbar happens at the CLI boundary only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import constants as sc

C_LIGHT = sc.c
HBAR = sc.hbar
K_B = sc.k
AMU = sc.atomic_mass

MBAR = 100.0  # Pa
TWO_PI = 2.0 * math.pi

AXES = ("x", "y", "z")

NODE = math.pi / 2
SLOPE = math.pi / 4
ANTINODE = 0.0
NAMED_PHASES = {"node": NODE, "slope": SLOPE, "antinode": ANTINODE}

# Epstein drag prefactor for diffuse reflection, free-molecular regime.
EPSTEIN_PREFACTOR = 15.8


class ParameterError(ValueError):
    """A physical parameter is outside its domain."""


class InstabilityError(RuntimeError):
    """The linearized system is dynamically unstable (particle loss)."""


def _require_positive(name, value):
    if not value > 0:
        raise ParameterError(f"{name} must be positive, got {value!r}")


# --------------------------------------------------------------------------
# closed-form relations

def linewidth_from_finesse(finesse: float, length: float) -> float:
    """Cavity energy decay rate kappa = pi c / (F L), in rad/s."""
    if not finesse > 1:
        raise ParameterError(f"finesse must exceed 1, got {finesse!r}")
    _require_positive("length", length)
    return math.pi * C_LIGHT / (finesse * length)


def finesse_from_linewidth(kappa: float, length: float) -> float:
    _require_positive("kappa", kappa)
    _require_positive("length", length)
    return math.pi * C_LIGHT / (kappa * length)


def purcell_factor(finesse: float, wavelength: float, waist: float) -> float:
    """eta = 6 F lambda^2 / (pi^3 w0^2)."""
    for name, v in (("finesse", finesse), ("wavelength", wavelength), ("waist", waist)):
        _require_positive(name, v)
    return 6.0 * finesse * wavelength**2 / (math.pi**3 * waist**2)


def scattered_fraction(eta: float) -> float:
    """Fraction of the scattered power emitted into the cavity mode."""
    if eta < 0:
        raise ParameterError(f"Purcell factor must be non-negative, got {eta!r}")
    return eta / (eta + 1.0)


def particle_mass(diameter: float, density: float) -> float:
    _require_positive("diameter", diameter)
    _require_positive("density", density)
    return density * math.pi * diameter**3 / 6.0


def trap_frequencies(power, tweezer: "TweezerParams") -> np.ndarray:
    """Trap frequencies at tweezer power ``power``; Omega scales as sqrt(P)."""
    _require_positive("power", power)
    return np.asarray(tweezer.omega_ref, dtype=float) * math.sqrt(power / tweezer.reference_power)


def mean_thermal_speed(temperature: float, molecular_mass: float) -> float:
    return math.sqrt(8.0 * K_B * temperature / (math.pi * molecular_mass))


def gas_damping(env: "EnvironmentParams", particle: "ParticleParams") -> float:
    """Epstein gas damping rate in rad/s, linear in pressure."""
    if env.pressure < 0:
        raise ParameterError(f"pressure must be non-negative, got {env.pressure!r}")
    radius = particle.diameter / 2
    vbar = mean_thermal_speed(env.gas_temperature, env.gas_molecular_mass)
    return EPSTEIN_PREFACTOR * radius**2 * env.pressure / (particle.mass * vbar)


def coupling_rates(g0, phase, epsilon, power, reference_power, z_ratio=1.0) -> np.ndarray:
    """Per-axis couplings (g_x, g_y, g_z) in rad/s.

    The y (cavity axis) coupling follows sin(phase), the z coupling cos(phase),
    and x picks up a fraction ``epsilon`` of the y coupling through the
    polarization misalignment of the tweezer.
    """
    if g0 < 0:
        raise ParameterError(f"g0 must be non-negative, got {g0!r}")
    _require_positive("power", power)
    scale = g0 * math.sqrt(power / reference_power)
    s, c = math.sin(phase), math.cos(phase)
    # cos(pi/2) is 6e-17 in floating point; a node must decouple z exactly
    s, c = (0.0 if abs(v) < 1e-12 else v for v in (s, c))
    return np.array([epsilon * scale * s, scale * s, z_ratio * scale * c])


def is_dynamically_stable(g, detuning, omega) -> bool:
    """Sharp version of the g^2 >~ |Delta| Omega loss criterion.

    ``g`` and ``omega`` may be scalars or per-axis sequences; the system is
    flagged unstable if any axis satisfies g_i^2 >= |Delta| Omega_i. A scalar
    ``g`` with several frequencies is tested against the smallest one.
    """
    g = np.atleast_1d(np.asarray(g, dtype=float))
    omega = np.atleast_1d(np.asarray(omega, dtype=float))
    if np.any(omega <= 0):
        raise ParameterError("trap frequencies must be positive")
    if g.size == 1:
        omega = omega.min(keepdims=True)
    omega = np.broadcast_to(omega, g.shape)
    coupled = g != 0
    return not bool(np.any(g[coupled] ** 2 >= abs(detuning) * omega[coupled]))


def static_instability_threshold(detuning, kappa, omega):
    """Coupling g^2 (rad^2/s^2) at which the optical spring cancels the trap.

    Exact for the linearized model with a single coupled axis: the
    adiabatically eliminated cavity adds a stiffness 4 g^2 Delta / (Delta^2 +
    kappa^2 / 4) in units of Omega, giving g^2 = Omega (Delta^2 + kappa^2/4) /
    (4 Delta). Several axes share one cavity mode, so the loss condition is
    sum_i g_i^2 / threshold_i >= 1. Returns inf for Delta <= 0, where the
    spring stiffens and the loss mechanism is anti-damping instead.
    """
    detuning = np.asarray(detuning, dtype=float)
    omega = np.asarray(omega, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        g2 = omega * (detuning**2 + kappa**2 / 4) / (4 * detuning)
    return np.where(detuning > 0, g2, np.inf)


def min_phonon_number(kappa: float, omega: float) -> float:
    """Bad-cavity cooling floor kappa / (4 Omega)."""
    _require_positive("omega", omega)
    return kappa / (4.0 * omega)


def sideband_asymmetry(detuning, kappa, omega):
    """Difference of anti-Stokes and Stokes cavity susceptibilities.

    Multiplying by g^2 kappa gives the cooling rate. Vectorized.
    """
    k2 = kappa**2 / 4
    return 1.0 / ((detuning - omega) ** 2 + k2) - 1.0 / ((detuning + omega) ** 2 + k2)


def cavity_cooling_rate(g, detuning, kappa, omega, *, check_stability=True):
    """Weak-coupling cavity cooling rate in rad/s (positive for detuning > 0)."""
    if check_stability and np.any(np.asarray(omega) > 0):
        if not is_dynamically_stable(g, detuning, np.where(np.asarray(omega) > 0, omega, 1.0)):
            raise InstabilityError(
                f"g^2 >= |Delta| Omega for g={g!r}, Delta={detuning!r}, Omega={omega!r}"
            )
    return np.asarray(g) ** 2 * kappa * sideband_asymmetry(detuning, kappa, omega)


def noise_heating_rate(power, reference_power, rate_ref):
    """Displacement-noise heating rate, growing as P^2 (K/s)."""
    if power < 0:
        raise ParameterError(f"power must be non-negative, got {power!r}")
    return np.asarray(rate_ref, dtype=float) * (power / reference_power) ** 2


def canonical_phase(phase: float) -> float:
    """Map a standing-wave phase into [0, pi)."""
    if isinstance(phase, str):
        try:
            phase = NAMED_PHASES[phase]
        except KeyError:
            raise ParameterError(
                f"unknown phase name {phase!r}; expected one of {sorted(NAMED_PHASES)} or radians"
            ) from None
    p = math.fmod(float(phase), math.pi)
    if p < 0:
        p += math.pi
    # fmod can return pi - tiny for inputs like -0.0; keep the range half-open
    return 0.0 if p >= math.pi else p


# --------------------------------------------------------------------------
# parameter containers

@dataclass(frozen=True)
class CavityParams:
    wavelength: float = 1550e-9
    length: float = 6.46e-3
    finesse: float | None = 22e3
    waist: float = 48e-6
    kappa: float | None = None
    absorption: float = 45e-6
    transmission: float = 99e-6
    roc: float = 10.0e-3

    def __post_init__(self):
        _require_positive("cavity length", self.length)
        _require_positive("cavity waist", self.waist)
        _require_positive("wavelength", self.wavelength)
        if self.finesse is None and self.kappa is None:
            raise ParameterError("one of finesse or kappa is required")
        if self.kappa is None:
            object.__setattr__(self, "kappa", linewidth_from_finesse(self.finesse, self.length))
        elif self.finesse is None:
            object.__setattr__(self, "finesse", finesse_from_linewidth(self.kappa, self.length))
        else:
            expected = linewidth_from_finesse(self.finesse, self.length)
            if abs(self.kappa - expected) / self.kappa > 1e-6:
                raise ParameterError(
                    f"kappa={self.kappa!r} inconsistent with finesse and length (expected {expected!r})"
                )
        if not self.finesse > 1:
            raise ParameterError(f"finesse must exceed 1, got {self.finesse!r}")

    @property
    def purcell(self) -> float:
        return purcell_factor(self.finesse, self.wavelength, self.waist)


@dataclass(frozen=True)
class TweezerParams:
    power: float = 0.5
    reference_power: float = 0.5
    numerical_aperture: float = 0.83
    detuning: float = TWO_PI * 400e3
    polarization_misalignment: float = 0.15
    omega_ref: tuple = (TWO_PI * 0.12e6, TWO_PI * 0.14e6, TWO_PI * 0.04e6)

    def __post_init__(self):
        _require_positive("tweezer power", self.power)
        _require_positive("reference power", self.reference_power)
        if not 0 < self.numerical_aperture < 1:
            raise ParameterError(f"NA must lie in (0, 1), got {self.numerical_aperture!r}")
        if not 0 <= self.polarization_misalignment < 1:
            raise ParameterError("polarization misalignment must lie in [0, 1)")
        omega = tuple(float(w) for w in self.omega_ref)
        if len(omega) != 3 or min(omega) <= 0:
            raise ParameterError(f"need three positive reference trap frequencies, got {omega!r}")
        object.__setattr__(self, "omega_ref", omega)

    @property
    def omega(self) -> np.ndarray:
        return trap_frequencies(self.power, self)


@dataclass(frozen=True)
class ParticleParams:
    diameter: float = 136e-9
    density: float = 1850.0

    def __post_init__(self):
        _require_positive("particle diameter", self.diameter)
        _require_positive("particle density", self.density)

    @property
    def mass(self) -> float:
        return particle_mass(self.diameter, self.density)


@dataclass(frozen=True)
class EnvironmentParams:
    pressure: float = 3e-3 * MBAR
    gas_temperature: float = 300.0
    gas_molecular_mass: float = 28.97 * AMU
    noise_heating_ref: tuple = (33.0, 33.0, 330.0)

    def __post_init__(self):
        if self.pressure < 0:
            raise ParameterError(f"pressure must be non-negative, got {self.pressure!r}")
        _require_positive("gas temperature", self.gas_temperature)
        _require_positive("gas molecular mass", self.gas_molecular_mass)
        rates = tuple(float(r) for r in self.noise_heating_ref)
        if len(rates) != 3 or min(rates) < 0:
            raise ParameterError(f"need three non-negative heating rates, got {rates!r}")
        object.__setattr__(self, "noise_heating_ref", rates)


@dataclass(frozen=True)
class CouplingParams:
    g0: float = TWO_PI * 33e3
    phase: float = NODE
    z_ratio: float = 1.0

    def __post_init__(self):
        if self.g0 < 0:
            raise ParameterError(f"g0 must be non-negative, got {self.g0!r}")
        if self.z_ratio < 0:
            raise ParameterError("z_ratio must be non-negative")
        object.__setattr__(self, "phase", canonical_phase(self.phase))


@dataclass(frozen=True)
class SystemParams:
    cavity: CavityParams = field(default_factory=CavityParams)
    tweezer: TweezerParams = field(default_factory=TweezerParams)
    particle: ParticleParams = field(default_factory=ParticleParams)
    environment: EnvironmentParams = field(default_factory=EnvironmentParams)
    coupling: CouplingParams = field(default_factory=CouplingParams)

    # derived quantities -------------------------------------------------
    @property
    def kappa(self) -> float:
        return self.cavity.kappa

    @property
    def detuning(self) -> float:
        return self.tweezer.detuning

    @property
    def mass(self) -> float:
        return self.particle.mass

    @property
    def omega(self) -> np.ndarray:
        return self.tweezer.omega

    @property
    def gamma_gas(self) -> float:
        return gas_damping(self.environment, self.particle)

    @property
    def couplings(self) -> np.ndarray:
        return coupling_rates(
            self.coupling.g0,
            self.coupling.phase,
            self.tweezer.polarization_misalignment,
            self.tweezer.power,
            self.tweezer.reference_power,
            self.coupling.z_ratio,
        )

    @property
    def noise_heating(self) -> np.ndarray:
        return noise_heating_rate(
            self.tweezer.power, self.tweezer.reference_power, self.environment.noise_heating_ref
        )

    @property
    def cooling_rates(self) -> np.ndarray:
        """Weak-coupling cavity cooling rate per axis (no stability check)."""
        return cavity_cooling_rate(
            self.couplings, self.detuning, self.kappa, self.omega, check_stability=False
        )

    def stable(self) -> bool:
        return is_dynamically_stable(self.couplings, self.detuning, self.omega)

    # convenience builders -----------------------------------------------
    def with_(self, **changes) -> "SystemParams":
        """Copy with leaf fields replaced, e.g. ``sys.with_(pressure=1.0, phase=0)``."""
        parts = {
            "cavity": self.cavity,
            "tweezer": self.tweezer,
            "particle": self.particle,
            "environment": self.environment,
            "coupling": self.coupling,
        }
        updates: dict[str, dict] = {k: {} for k in parts}
        for key, value in changes.items():
            owner = next((name for name, obj in parts.items() if key in obj.__dataclass_fields__), None)
            if owner is None:
                raise ParameterError(f"unknown parameter {key!r}")
            updates[owner][key] = value
        if "finesse" in updates["cavity"] or "length" in updates["cavity"]:
            updates["cavity"].setdefault("kappa", None)
        elif "kappa" in updates["cavity"]:
            updates["cavity"].setdefault("finesse", None)
        new = {name: replace(obj, **updates[name]) if updates[name] else obj for name, obj in parts.items()}
        return SystemParams(**new)


def paper_defaults() -> SystemParams:
    return SystemParams()


def calibrate_g0(sys: SystemParams, target_rate: float, axis: str = "y",
                 phase: float = NODE, detuning: float | None = None) -> float:
    """Bare coupling g0 giving cooling rate ``target_rate`` (rad/s) on ``axis``.

    The cooling rate is quadratic in g0, so this is a closed-form inversion
    of the weak-coupling rate at the given phase and detuning.
    """
    probe = sys.with_(g0=1.0, phase=phase)
    if detuning is not None:
        probe = probe.with_(detuning=detuning)
    unit_rate = probe.cooling_rates[AXES.index(axis)]
    if not unit_rate > 0:
        raise ParameterError(f"axis {axis!r} is not cooled at phase={phase!r}")
    return math.sqrt(target_rate / unit_rate)
