"""Linearized cavity + 3D mechanical dynamics.

State layout is fixed as ``(X, Y, q_x, p_x, q_y, p_y, q_z, p_z)``: cavity
quadratures followed by dimensionless mechanical quadratures in zero-point
units, so that ``x_i = sqrt(2) * x_zp * q_i`` with ``x_zp = sqrt(hbar / (2 m Omega))``.

The same drift/diffusion pair feeds two independent routes: the Lyapunov
solve (:func:`steady_state_covariance`) and the stochastic integrator
(:func:`simulate`). The integrator never touches the Lyapunov solution.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg

from .params import AXES, HBAR, K_B, InstabilityError, SystemParams

LABELS = ("X", "Y", "q_x", "p_x", "q_y", "p_y", "q_z", "p_z")
Q_INDEX = {"x": 2, "y": 4, "z": 6}
DIVERGENCE_BOUND = 1e6


@dataclass(frozen=True)
class LinearModel:
    drift: np.ndarray
    diffusion: np.ndarray
    omega: np.ndarray          # mechanical frequencies (rad/s), per axis
    mass: float
    gamma_gas: float = 0.0
    gas_temperature: float = 300.0

    def __post_init__(self):
        for name in ("drift", "diffusion"):
            a = np.asarray(getattr(self, name), dtype=float)
            if a.shape != (8, 8):
                raise ValueError(f"{name} must be 8x8, got {a.shape}")
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        d = self.diffusion
        if not np.allclose(d, d.T, rtol=1e-12, atol=0):
            raise ValueError("diffusion matrix must be symmetric")
        scale = max(1.0, float(np.max(np.abs(d))))
        if np.linalg.eigvalsh(d).min() < -1e-12 * scale:
            raise ValueError("diffusion matrix must be positive semidefinite")
        object.__setattr__(self, "omega", np.asarray(self.omega, dtype=float))

    @property
    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvals(self.drift)

    def is_stable(self) -> bool:
        return bool(np.max(self.eigenvalues.real) < 0)

    def zero_point_length(self) -> np.ndarray:
        """x_zp = sqrt(hbar / (2 m Omega)) per axis (m)."""
        return np.sqrt(HBAR / (2 * self.mass * self.omega))

    def with_diffusion(self, diffusion) -> "LinearModel":
        return replace(self, diffusion=np.asarray(diffusion, dtype=float))


def thermal_occupation(temperature, omega):
    """Classical occupation k_B T / (hbar Omega)."""
    return K_B * np.asarray(temperature) / (HBAR * np.asarray(omega))


def displacement_noise_diffusion(heating_rate, omega):
    """Momentum diffusion (1/s) that heats a free oscillator at ``heating_rate`` K/s."""
    return 2 * K_B * np.asarray(heating_rate) / (HBAR * np.asarray(omega))


def build_linear_model(sys: SystemParams, *, couplings=None, detuning=None) -> LinearModel:
    """Drift and diffusion matrices for the linearized coherent-scattering model.

    ``couplings`` and ``detuning`` override the values derived from ``sys``;
    relaxation experiments use this to switch the cavity on and off.
    """
    kappa = sys.kappa
    delta = sys.detuning if detuning is None else detuning
    g = sys.couplings if couplings is None else np.asarray(couplings, dtype=float)
    omega = sys.omega
    gamma = sys.gamma_gas
    t_gas = sys.environment.gas_temperature

    M = np.zeros((8, 8))
    M[0, 0] = M[1, 1] = -kappa / 2
    M[0, 1] = delta
    M[1, 0] = -delta
    D = np.zeros((8, 8))
    D[0, 0] = D[1, 1] = kappa / 2

    n_gas = thermal_occupation(t_gas, omega)
    d_noise = displacement_noise_diffusion(sys.noise_heating, omega)
    for i in range(3):
        q, p = 2 + 2 * i, 3 + 2 * i
        M[1, q] = -2 * g[i]
        M[q, p] = omega[i]
        M[p, q] = -omega[i]
        M[p, p] = -gamma
        M[p, 0] = -2 * g[i]
        D[p, p] = 2 * gamma * (n_gas[i] + 0.5) + d_noise[i]
    return LinearModel(M, D, omega, sys.mass, gamma, t_gas)


# --------------------------------------------------------------------------
# steady state oracle

def steady_state_covariance(model: LinearModel) -> np.ndarray:
    """Solve M C + C M^T + D = 0 for the stationary covariance."""
    ev = model.eigenvalues
    if np.max(ev.real) >= 0:
        raise InstabilityError(
            f"drift matrix has eigenvalue with Re >= 0 (max Re = {np.max(ev.real):.3g} 1/s): particle loss"
        )
    C = linalg.solve_continuous_lyapunov(model.drift, -model.diffusion)
    return 0.5 * (C + C.T)


def temperature_from_covariance(C, axis, omega) -> float:
    """T = hbar Omega (<q^2> + <p^2>) / (2 k_B) for one mechanical axis."""
    i = Q_INDEX[axis] if isinstance(axis, str) else 2 + 2 * int(axis)
    return HBAR * omega * (C[i, i] + C[i + 1, i + 1]) / (2 * K_B)


def steady_state_temperatures(model: LinearModel) -> np.ndarray:
    C = steady_state_covariance(model)
    return np.array([temperature_from_covariance(C, a, w) for a, w in zip(AXES, model.omega)])


def mean_occupation(model: LinearModel) -> np.ndarray:
    C = steady_state_covariance(model)
    return np.array([(C[q, q] + C[q + 1, q + 1]) / 2 - 0.5 for q in (2, 4, 6)])


def effective_damping(model: LinearModel) -> np.ndarray:
    """Energy damping rate per axis from the mechanical-like eigenvalues of M.

    Each axis is assigned the eigenvalue (with positive imaginary part) whose
    eigenvector has the largest weight on that axis' quadratures; the rate is
    -2 Re(lambda), which equals the spectral FWHM for a weakly damped mode.
    """
    ev, vec = np.linalg.eig(model.drift)
    weights = np.abs(vec) ** 2
    weights /= weights.sum(axis=0, keepdims=True)
    out = np.empty(3)
    for i in range(3):
        w = weights[2 + 2 * i] + weights[3 + 2 * i]
        w = np.where(ev.imag > 0, w, -1.0)
        out[i] = -2 * ev[np.argmax(w)].real
    return out


def analytic_psd(model: LinearModel, freqs, channel="q_y") -> np.ndarray:
    """One-sided PSD (units^2/Hz) of one state channel, from the transfer function.

    P(f) = 2 [H D H^dagger]_jj with H = (i 2 pi f - M)^-1, which integrates to
    the stationary variance over f in [0, inf).
    """
    j = LABELS.index(channel) if isinstance(channel, str) else int(channel)
    freqs = np.atleast_1d(np.asarray(freqs, dtype=float))
    eye = np.eye(8)
    out = np.empty(freqs.shape)
    for k, f in enumerate(freqs):
        # row j of H via a transposed solve
        h = np.linalg.solve((2j * math.pi * f * eye - model.drift).T, eye[j])
        out[k] = 2 * np.real(h @ model.diffusion @ h.conj())
    return out


# --------------------------------------------------------------------------
# exact discretization and sampling

def discretize(model: LinearModel, dt: float):
    """Exact one-step propagator and a factor of the per-step noise covariance.

    Returns ``(A, L)`` with ``x[n+1] = A x[n] + L xi``, ``xi ~ N(0, I)``.
    The step covariance Q(dt) = int_0^dt e^{Ms} D e^{M^T s} ds is built by
    repeated doubling Q(2h) = Q(h) + e^{Mh} Q(h) e^{M^T h} starting from a
    substep short enough for Van Loan's block exponential to be well
    conditioned (it overflows for stiff M at large dt).
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt!r}")
    M, D = model.drift, model.diffusion
    norm = max(np.linalg.norm(M, 1), 1e-300)
    k = max(0, math.ceil(math.log2(norm * dt / 0.5)))
    h = dt / 2**k
    block = np.zeros((16, 16))
    block[:8, :8] = -M
    block[:8, 8:] = D
    block[8:, 8:] = M.T
    F = linalg.expm(block * h)
    A = F[8:, 8:].T
    Q = A @ F[:8, 8:]
    for _ in range(k):
        Q = Q + A @ Q @ A.T
        A = A @ A
    Q = 0.5 * (Q + Q.T)
    w, V = np.linalg.eigh(Q)
    L = V * np.sqrt(np.clip(w, 0, None))
    return A, L


def sample_state(cov, rng, size=None) -> np.ndarray:
    """Draw Gaussian states with covariance ``cov`` (eigen-factorized)."""
    w, V = np.linalg.eigh(0.5 * (cov + cov.T))
    L = V * np.sqrt(np.clip(w, 0, None))
    shape = (8,) if size is None else (size, 8)
    return rng.standard_normal(shape) @ L.T


def thermal_state_covariance(model: LinearModel, temperatures) -> np.ndarray:
    """Uncorrelated mechanical thermal state (vacuum cavity) at given temperatures."""
    cov = np.diag([0.5, 0.5, 0, 0, 0, 0, 0, 0]).astype(float)
    n = K_B * np.broadcast_to(np.asarray(temperatures, float), (3,)) / (HBAR * model.omega)
    for i in range(3):
        cov[2 + 2 * i, 2 + 2 * i] = cov[3 + 2 * i, 3 + 2 * i] = max(n[i], 0.5)
    return cov


def member_rngs(seed, n):
    """Independent generators for ensemble members 0..n-1 of ``seed``."""
    return [np.random.default_rng([int(seed), i]) for i in range(n)]


_CHUNK = 4096


def propagate(A, L, x0, n_steps, rngs, *, record=None, every=1, kick=None,
              bound=DIVERGENCE_BOUND):
    """Advance a batch of states ``x0`` (shape ``(B, 8)``) by ``n_steps`` steps.

    Each batch member draws its noise from its own generator, so results do
    not depend on batch composition. Records the channels in ``record`` every
    ``every`` steps (after each step) and returns ``(samples, x_final)`` with
    ``samples`` shaped ``(B, n_steps // every, len(record))``.

    ``kick(x, fraction)`` optionally applies a nonlinear momentum correction
    before and after each linear step (Strang splitting).
    """
    x = np.array(x0, dtype=float, copy=True)
    if x.ndim == 1:
        x = x[None, :]
    B = x.shape[0]
    if len(rngs) != B:
        raise ValueError("need one generator per batch member")
    record = list(range(8)) if record is None else list(record)
    n_out = n_steps // every
    out = np.empty((B, n_out, len(record)))
    AT, LT = np.ascontiguousarray(A.T), L.T
    tmp = np.empty_like(x)
    step = 0
    j = 0
    while step < n_steps:
        m = min(_CHUNK, n_steps - step)
        buf = np.stack([r.standard_normal((m, 8)) for r in rngs], axis=1) @ LT
        if kick is None:
            for k in range(m):
                np.matmul(x, AT, out=tmp)
                np.add(tmp, buf[k], out=buf[k])
                x = buf[k]
        else:
            for k in range(m):
                kick(x, 0.5)
                np.matmul(x, AT, out=tmp)
                np.add(tmp, buf[k], out=buf[k])
                kick(buf[k], 0.5)
                x = buf[k].copy()
        # buf now holds the states after steps step+1 .. step+m
        first = (-(step + 1)) % every
        picked = buf[first::every][:, :, record]
        take = min(picked.shape[0], n_out - j)
        out[:, j:j + take, :] = picked[:take].transpose(1, 0, 2)
        j += take
        step += m
        x = x.copy()
        peak = np.max(np.abs(x))
        if not np.isfinite(peak) or peak > bound:
            raise InstabilityError(
                f"state norm exceeded {bound:g} zero-point units after {step} steps: particle loss"
            )
    return out, x


@dataclass
class TimeTrace:
    dt: float
    labels: tuple
    samples: np.ndarray       # (n_samples, n_channels)
    seed: int | None = None
    t0: float = 0.0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        self.labels = tuple(self.labels)
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.samples.ndim != 2 or self.samples.shape[0] < 2:
            raise ValueError("need a 2-D sample matrix with at least two samples")
        if self.samples.shape[1] != len(self.labels):
            raise ValueError(
                f"{self.samples.shape[1]} channels but {len(self.labels)} labels"
            )

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(1, self.n_samples + 1)

    @property
    def sample_rate(self) -> float:
        return 1.0 / self.dt

    def channel(self, label) -> np.ndarray:
        return self.samples[:, self.labels.index(label)]

    def to_meters(self, model: LinearModel) -> "TimeTrace":
        """Convert mechanical quadrature channels q_i to displacement in m."""
        xzp = dict(zip(AXES, model.zero_point_length()))
        cols, labels = [], []
        for k, lab in enumerate(self.labels):
            if lab.startswith("q_"):
                cols.append(self.samples[:, k] * math.sqrt(2) * xzp[lab[2:]])
                labels.append(lab[2:])
        return TimeTrace(self.dt, labels, np.column_stack(cols), self.seed, self.t0)


def _check_dt(model, duration, dt):
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt!r}")
    n = int(round(duration / dt))
    if n < 100:
        raise ValueError(f"duration must cover at least 100 steps, got {n}")
    return n


def simulate(model: LinearModel, duration: float, dt: float = 0.2e-6, seed: int = 0, *,
             x0=None, channels=LABELS, bound=DIVERGENCE_BOUND) -> TimeTrace:
    """Sample one trajectory of the linear stochastic system.

    Uses the exact discretization, so ``dt`` is only an output sampling
    interval and introduces no bias. Deterministic in (model, duration, dt,
    seed, x0). Starts from ``x0`` (default: origin).
    """
    n = _check_dt(model, duration, dt)
    A, L = discretize(model, dt)
    rng = np.random.default_rng(seed)
    x0 = np.zeros(8) if x0 is None else np.asarray(x0, dtype=float)
    idx = [LABELS.index(c) for c in channels]
    out, _ = propagate(A, L, x0, n, [rng], record=idx, bound=bound)
    return TimeTrace(dt, channels, out[0], seed)


def simulate_ensemble(model: LinearModel, duration: float, dt: float, seed: int, n: int, *,
                      x0=None, channels=LABELS, first=0, bound=DIVERGENCE_BOUND):
    """Independent trajectories ``first .. first+n-1`` of ``seed``; shape (n, steps, ch)."""
    steps = _check_dt(model, duration, dt)
    A, L = discretize(model, dt)
    rngs = [np.random.default_rng([int(seed), first + i]) for i in range(n)]
    x0 = np.zeros((n, 8)) if x0 is None else np.broadcast_to(np.asarray(x0, float), (n, 8))
    idx = [LABELS.index(c) for c in channels]
    out, _ = propagate(A, L, x0, steps, rngs, record=idx, bound=bound)
    return out


# --------------------------------------------------------------------------
# nonlinear (Gaussian) trap

def default_trap_lengths(sys: SystemParams) -> tuple:
    """Gaussian focus length scales (w_t, w_t, z_R) from wavelength and NA."""
    lam = sys.cavity.wavelength
    w_t = lam / (math.pi * sys.tweezer.numerical_aperture)
    z_r = math.pi * w_t**2 / lam
    return (w_t, w_t, z_r)


@dataclass(frozen=True)
class NonlinearTrapModel:
    """Linear model whose restoring force is replaced by a Gaussian-trap force.

    Per axis, F(x) = -m Omega^2 x exp(-2 x^2 / w^2), which softens at large
    amplitude and matches the harmonic force to first order.
    """
    linear: LinearModel
    lengths: tuple

    def __post_init__(self):
        lengths = tuple(float(v) for v in self.lengths)
        if len(lengths) != 3 or min(lengths) <= 0:
            raise ValueError("need three positive trap length scales")
        object.__setattr__(self, "lengths", lengths)

    @classmethod
    def from_system(cls, sys: SystemParams, lengths=None, **kw) -> "NonlinearTrapModel":
        return cls(build_linear_model(sys, **kw), lengths or default_trap_lengths(sys))

    def restoring_force(self, x, axis) -> np.ndarray:
        """Gaussian-trap force (N) at displacement ``x`` (m) along ``axis``."""
        i = AXES.index(axis)
        m, w = self.linear.mass, self.lengths[i]
        return -m * self.linear.omega[i] ** 2 * x * np.exp(-2 * x**2 / w**2)

    def _alpha(self) -> np.ndarray:
        # exp(-2 x^2 / w^2) = exp(-alpha q^2) with x^2 = hbar q^2 / (m Omega)
        lin = self.linear
        return 2 * HBAR / (lin.mass * lin.omega * np.asarray(self.lengths) ** 2)

    def kick(self, dt):
        alpha = self._alpha()
        omega = self.linear.omega

        def apply(x, fraction):
            q = x[:, 2::2]
            x[:, 3::2] -= (fraction * dt) * omega * q * np.expm1(-alpha * q * q)
        return apply


def simulate_nonlinear(model: NonlinearTrapModel, duration: float, dt: float | None = None,
                       seed: int = 0, *, x0=None, n: int = 1, channels=LABELS, first=0,
                       bound=DIVERGENCE_BOUND):
    """Stochastic leapfrog for the Gaussian trap.

    Strang splitting: half nonlinear momentum kick, exact linear step with
    exact noise, half kick. Requires dt <= 1 / (50 max Omega). Returns a
    TimeTrace for ``n == 1``, else an array shaped (n, steps, channels).
    """
    dt_max = 1.0 / (50 * float(np.max(model.linear.omega)))
    dt = dt_max if dt is None else dt
    if dt > dt_max * (1 + 1e-12):
        raise ValueError(f"dt={dt:g} s exceeds 1/(50 max Omega) = {dt_max:g} s")
    steps = _check_dt(model.linear, duration, dt)
    A, L = discretize(model.linear, dt)
    if n == 1 and first == 0:
        rngs = [np.random.default_rng(seed)]
    else:
        rngs = [np.random.default_rng([int(seed), first + i]) for i in range(n)]
    x0 = np.zeros((n, 8)) if x0 is None else np.broadcast_to(np.asarray(x0, float), (n, 8))
    idx = [LABELS.index(c) for c in channels]
    out, _ = propagate(A, L, x0, steps, rngs, record=idx, kick=model.kick(dt), bound=bound)
    if n == 1:
        return TimeTrace(dt, channels, out[0], seed)
    return out


def heating_trajectory(t, t_start, gamma_gas, gas_temperature=300.0, noise_heating=0.0):
    """Mean temperature after the cavity is switched off.

    T(t) = T_eff + (T_start - T_eff) exp(-gamma t) with
    T_eff = T_gas + noise_heating / gamma; linear growth when gamma = 0.
    """
    t = np.asarray(t, dtype=float)
    if gamma_gas == 0:
        return t_start + noise_heating * t
    t_eff = gas_temperature + noise_heating / gamma_gas
    return t_eff + (t_start - t_eff) * np.exp(-gamma_gas * t)
