"""Command-line entry point: ``levicav <subcommand> CONFIG [options]``.

Configuration files are JSON with sections cavity, tweezer, particle,
environment, coupling and sweep. Frequencies are ordinary frequencies in Hz,
pressures in mbar, powers in W, lengths in the unit named by the key suffix.
"""

from __future__ import annotations

import argparse
import copy
import datetime as _dt
import json
import math
import os
import sys
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import analysis, dynamics, experiments, formats
from .params import (AMU, AXES, MBAR, NAMED_PHASES, TWO_PI, CavityParams, CouplingParams,
                     EnvironmentParams, InstabilityError, ParameterError, ParticleParams,
                     SystemParams, TweezerParams, calibrate_g0, canonical_phase)

EXIT_OK, EXIT_CONFIG, EXIT_INSTABILITY, EXIT_ANALYSIS, EXIT_IO = 0, 2, 3, 4, 5
SUBCOMMANDS = ("steady-state", "sweep-pressure", "relaxation", "sweep-detuning", "sweep-power",
               "psd")
SECTIONS = ("cavity", "tweezer", "particle", "environment", "coupling", "sweep")
SEED_ENV = "LEVICAV_SEED"

DEFAULT_GRIDS = {
    "pressure": [1e-5, 3e-5, 1e-4, 3e-4, 1e-3, 3e-3, 1e-2, 3e-2, 1e-1, 3e-1, 1.0, 3.0],
    "detuning": [0.3e6, 0.4e6, 0.6e6, 1e6, 2e6, 5e6, 10e6, 20e6],
    "power": [0.24, 0.29, 0.34, 0.40, 0.45, 0.50],
}


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# schema
#
# key -> (default, kind, unit, domain); kinds: num, num?, vec3, phase, phases,
# grid?, str, int. Domains: "pos" (> 0), "nonneg" (>= 0), "frac" ([0, 1)),
# "open01" ((0, 1)), or a tuple of allowed strings.

_C, _T, _P, _E, _G = CavityParams(), TweezerParams(), ParticleParams(), EnvironmentParams(), \
    CouplingParams()

SCHEMA = {
    "cavity": {
        "wavelength_nm": (_C.wavelength * 1e9, "num", "nm", "pos"),
        "length_mm": (_C.length * 1e3, "num", "mm", "pos"),
        "finesse": (_C.finesse, "num?", "dimensionless", "pos"),
        "linewidth_hz": (None, "num?", "Hz (kappa / 2 pi)", "pos"),
        "waist_um": (_C.waist * 1e6, "num", "um", "pos"),
        "absorption_ppm": (_C.absorption * 1e6, "num", "ppm", "nonneg"),
        "transmission_ppm": (_C.transmission * 1e6, "num", "ppm", "nonneg"),
        "roc_mm": (_C.roc * 1e3, "num", "mm", "pos"),
    },
    "tweezer": {
        "power_w": (_T.power, "num", "W", "pos"),
        "reference_power_w": (_T.reference_power, "num", "W", "pos"),
        "numerical_aperture": (_T.numerical_aperture, "num", "dimensionless", "open01"),
        "detuning_hz": (_T.detuning / TWO_PI, "num", "Hz", None),
        "polarization_misalignment": (_T.polarization_misalignment, "num", "dimensionless", "frac"),
        "trap_frequencies_hz": ([w / TWO_PI for w in _T.omega_ref], "vec3", "Hz", "pos"),
    },
    "particle": {
        "diameter_nm": (_P.diameter * 1e9, "num", "nm", "pos"),
        "density_kg_m3": (_P.density, "num", "kg/m^3", "pos"),
    },
    "environment": {
        "pressure_mbar": (_E.pressure / MBAR, "num", "mbar", "nonneg"),
        "gas_temperature_k": (_E.gas_temperature, "num", "K", "pos"),
        "gas_molecular_mass_u": (_E.gas_molecular_mass / AMU, "num", "u", "pos"),
        "noise_heating_k_per_s": (list(_E.noise_heating_ref), "vec3", "K/s", "nonneg"),
    },
    "coupling": {
        "g0_hz": (_G.g0 / TWO_PI, "num", "Hz", "nonneg"),
        "phase": ("node", "phase", "rad or node|slope|antinode", None),
        "z_ratio": (_G.z_ratio, "num", "dimensionless", "nonneg"),
        "target_cooling_rate_hz": (None, "num?", "Hz (gamma_c,y / 2 pi at the node)", "pos"),
    },
    "sweep": {
        "variable": ("pressure", "str", "pressure|detuning|power|phase",
                     ("pressure", "detuning", "power", "phase")),
        "values": (None, "grid?", "mbar | Hz | W | rad", None),
        "phases": (["node", "slope", "antinode"], "phases", "rad or names", None),
        "duration_s": (0.5, "num", "s", "pos"),
        "dt_s": (1e-6, "num", "s", "pos"),
        "ensemble": (1, "int", "count", "pos"),
        "c_nl_hz_per_k": (None, "vec3?", "Hz/K", "nonneg"),
        "on_detuning_hz": (400e3, "num", "Hz", None),
        "off_detuning_hz": (20e6, "num", "Hz", None),
        "pre_duration_s": (0.01, "num", "s", "pos"),
        "relaxation_duration_s": (0.2, "num", "s", "pos"),
        "relaxation_ensemble": (150, "int", "count", "pos"),
        "window_periods": (20.0, "num", "oscillation periods", "pos"),
        "batch": (16, "int", "count", "pos"),
    },
}
TOP_LEVEL = {
    "seed": (0, "int", "integer", "nonneg"),
    "mode": ("oracle", "str", "oracle|trajectory|nonlinear", experiments.MODES),
    "output_dir": ("runs", "str", "path", None),
}


def _fail(key, unit, msg):
    raise ConfigError(f"{key}: {msg} (expected {unit})")


def _number(key, v, unit):
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        _fail(key, unit, f"got {v!r}, need a finite number")
    return float(v)


def _check_domain(key, v, unit, domain):
    bad = {"pos": v <= 0, "nonneg": v < 0, "frac": not 0 <= v < 1, "open01": not 0 < v < 1}
    if isinstance(domain, str) and bad[domain]:
        words = {"pos": "must be positive", "nonneg": "must be non-negative",
                 "frac": "must lie in [0, 1)", "open01": "must lie in (0, 1)"}[domain]
        _fail(key, unit, f"{words}, got {v!r}")


def _phase(key, v, unit):
    if isinstance(v, str):
        if v.lower() not in NAMED_PHASES:
            _fail(key, unit, f"unknown phase name {v!r}")
        return v.lower()
    return _number(key, v, unit)


def _value(key, v, kind, unit, domain):
    if kind.endswith("?"):
        if v is None:
            return None
        kind = kind[:-1]
    if kind == "num":
        v = _number(key, v, unit)
        _check_domain(key, v, unit, domain)
        return v
    if kind == "int":
        if isinstance(v, bool) or not isinstance(v, int):
            _fail(key, unit, f"got {v!r}, need an integer")
        _check_domain(key, v, unit, domain)
        return v
    if kind == "str":
        if not isinstance(v, str):
            _fail(key, unit, f"got {v!r}, need a string")
        if isinstance(domain, tuple) and v not in domain:
            _fail(key, unit, f"got {v!r}")
        return v
    if kind == "vec3":
        if not isinstance(v, list) or len(v) != 3:
            _fail(key, unit, f"got {v!r}, need a list of three numbers")
        out = [_number(key, x, unit) for x in v]
        for x in out:
            _check_domain(key, x, unit, domain)
        return out
    if kind == "phase":
        return _phase(key, v, unit)
    if kind == "phases":
        if not isinstance(v, list) or not v:
            _fail(key, unit, f"got {v!r}, need a non-empty list")
        return [_phase(key, x, unit) for x in v]
    if kind == "grid":
        if not isinstance(v, list):
            _fail(key, unit, f"got {v!r}, need a list of numbers")
        return [_number(key, x, unit) for x in v]
    raise AssertionError(kind)


def normalize(raw) -> dict:
    """Validate a configuration mapping and fill defaults. Idempotent."""
    if not isinstance(raw, dict):
        raise ConfigError(f"configuration must be a JSON object with sections {list(SECTIONS)}")
    if "manifest_version" in raw:
        cfg = raw.get("config")
        if not isinstance(cfg, dict):
            raise ConfigError("manifest has no 'config' object")
        return normalize(cfg)
    missing = [s for s in SECTIONS if s not in raw]
    if missing:
        raise ConfigError(f"missing required sections {missing}; required: {list(SECTIONS)}")
    unknown = sorted(set(raw) - set(SECTIONS) - set(TOP_LEVEL))
    if unknown:
        raise ConfigError(f"unknown top-level keys {unknown}")
    out = {}
    for sec in SECTIONS:
        body = raw[sec]
        if not isinstance(body, dict):
            raise ConfigError(f"{sec}: must be an object")
        extra = sorted(set(body) - set(SCHEMA[sec]))
        if extra:
            raise ConfigError(f"{sec}: unknown keys {extra}; allowed: {sorted(SCHEMA[sec])}")
        out[sec] = {}
        for key, (default, kind, unit, domain) in SCHEMA[sec].items():
            v = body.get(key, copy.deepcopy(default))
            out[sec][key] = _value(f"{sec}.{key}", v, kind, unit, domain)
    for key, (default, kind, unit, domain) in TOP_LEVEL.items():
        out[key] = _value(key, raw.get(key, default), kind, unit, domain)
    if out["cavity"]["finesse"] is None and out["cavity"]["linewidth_hz"] is None:
        raise ConfigError("cavity: one of finesse or linewidth_hz is required")
    sweep = out["sweep"]
    if sweep["values"] is not None:
        vals = np.asarray(sweep["values"])
        d = np.diff(vals)
        if len(vals) > 1 and not (np.all(d > 0) or np.all(d < 0)):
            raise ConfigError("sweep.values: grid must be strictly monotone")
    system_from_config(out)  # domain checks that need the whole parameter set
    return out


def system_from_config(cfg: dict) -> SystemParams:
    c, t, p, e, g = (cfg[s] for s in ("cavity", "tweezer", "particle", "environment", "coupling"))
    try:
        cav = CavityParams(
            wavelength=c["wavelength_nm"] * 1e-9, length=c["length_mm"] * 1e-3,
            finesse=c["finesse"], waist=c["waist_um"] * 1e-6,
            kappa=None if c["linewidth_hz"] is None else TWO_PI * c["linewidth_hz"],
            absorption=c["absorption_ppm"] * 1e-6, transmission=c["transmission_ppm"] * 1e-6,
            roc=c["roc_mm"] * 1e-3)
        tw = TweezerParams(
            power=t["power_w"], reference_power=t["reference_power_w"],
            numerical_aperture=t["numerical_aperture"], detuning=TWO_PI * t["detuning_hz"],
            polarization_misalignment=t["polarization_misalignment"],
            omega_ref=tuple(TWO_PI * f for f in t["trap_frequencies_hz"]))
        pa = ParticleParams(diameter=p["diameter_nm"] * 1e-9, density=p["density_kg_m3"])
        env = EnvironmentParams(
            pressure=e["pressure_mbar"] * MBAR, gas_temperature=e["gas_temperature_k"],
            gas_molecular_mass=e["gas_molecular_mass_u"] * AMU,
            noise_heating_ref=tuple(e["noise_heating_k_per_s"]))
        cp = CouplingParams(g0=TWO_PI * g["g0_hz"], phase=g["phase"], z_ratio=g["z_ratio"])
        sys_ = SystemParams(cav, tw, pa, env, cp)
        if g["target_cooling_rate_hz"] is not None:
            # g0 is a property of the hardware; calibrate on the cooling side of the resonance
            sys_ = sys_.with_(g0=calibrate_g0(sys_, TWO_PI * g["target_cooling_rate_hz"],
                                              detuning=abs(sys_.detuning)))
    except ParameterError as exc:
        raise ConfigError(str(exc)) from exc
    return sys_


@dataclass(frozen=True)
class RunConfig:
    raw: dict                 # normalized configuration in file units
    system: SystemParams
    seed: int
    mode: str
    output_dir: Path

    def sweep_plan(self, variable=None, phases=None) -> experiments.SweepPlan:
        s = self.raw["sweep"]
        variable = variable or s["variable"]
        values = s["values"] if s["values"] is not None and variable == s["variable"] \
            else DEFAULT_GRIDS.get(variable, [])
        scale = {"pressure": MBAR, "detuning": TWO_PI, "power": 1.0, "phase": 1.0}[variable]
        c_nl = None if s["c_nl_hz_per_k"] is None else tuple(TWO_PI * v for v in s["c_nl_hz_per_k"])
        return experiments.SweepPlan(
            variable, tuple(v * scale for v in values), self.system,
            tuple(canonical_phase(ph) for ph in (phases or s["phases"])), self.mode,
            s["duration_s"], s["dt_s"], s["ensemble"], self.seed, c_nl)

    def relaxation_plan(self, phases=None) -> experiments.RelaxationPlan:
        s = self.raw["sweep"]
        return experiments.RelaxationPlan(
            self.system, tuple(canonical_phase(ph) for ph in (phases or s["phases"])),
            s["relaxation_ensemble"], s["relaxation_duration_s"], s["pre_duration_s"],
            s["dt_s"], self.seed, TWO_PI * s["on_detuning_hz"], TWO_PI * s["off_detuning_hz"],
            s["window_periods"], batch=s["batch"])


def config_from_dict(raw: dict) -> RunConfig:
    cfg = normalize(raw)
    return RunConfig(cfg, system_from_config(cfg), cfg["seed"], cfg["mode"], Path(cfg["output_dir"]))


def parse_config(path) -> RunConfig:
    return config_from_dict(_read_json(Path(path)))


def emit_config(cfg: RunConfig) -> dict:
    return copy.deepcopy(cfg.raw)


def default_config_path() -> Path:
    return Path(str(resources.files("levicav") / "data" / "paper_defaults.json"))


def apply_overrides(raw: dict, assignments) -> dict:
    """Apply ``section.key=value`` overrides; values are JSON, else plain strings."""
    raw = copy.deepcopy(raw)
    if "manifest_version" in raw:
        raw = copy.deepcopy(raw.get("config") or {})
    for item in assignments or ():
        key, sep, text = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        parts = key.strip().split(".")
        node = raw
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {part} is not a section")
        node[parts[-1]] = value
    return raw


# --------------------------------------------------------------------------
# commands

def _run_dir(base: Path, subcommand: str) -> Path:
    stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S-%f")
    path = Path(base) / f"{subcommand}-{stamp}"
    try:
        path.mkdir(parents=True, exist_ok=False)
    except OSError as exc:
        raise OSError(f"cannot create run directory {path}: {exc.strerror or exc}") from exc
    return path


def _log(msg):
    print(msg, file=sys.stderr, flush=True)


def cmd_steady_state(cfg: RunConfig, out: Path, args) -> dict:
    sys_ = cfg.system
    model = dynamics.build_linear_model(sys_)
    T = dynamics.steady_state_temperatures(model)
    gamma_eff = dynamics.effective_damping(model)
    rates = sys_.cooling_rates
    rows = [[a, float(T[i]), float(rates[i] / TWO_PI), float(gamma_eff[i] / TWO_PI)]
            for i, a in enumerate(AXES)]
    cols = ["axis", "temperature_K", "cooling_rate_hz", "damping_hz"]
    if cfg.mode != "oracle":
        s = cfg.raw["sweep"]
        nl = dynamics.NonlinearTrapModel.from_system(sys_) if cfg.mode == "nonlinear" else None
        dt = s["dt_s"] if nl is None else min(s["dt_s"], 1 / (50 * float(np.max(sys_.omega))))
        x0 = dynamics.sample_state(dynamics.steady_state_covariance(model),
                                   np.random.default_rng([cfg.seed, 2**31 - 1]))
        if nl is None:
            trace = dynamics.simulate(model, s["duration_s"], dt, cfg.seed, x0=x0)
        else:
            trace = dynamics.simulate_nonlinear(nl, s["duration_s"], dt, cfg.seed, x0=x0)
        meters = trace.to_meters(model)
        formats.write_trace(out / "trace.bin", meters)
        seg = max(256, meters.n_samples // 8)
        for i, a in enumerate(AXES):
            sp = analysis.trace_psd(meters, a, seg)
            rows[i].append(analysis.temperature_from_area(sp, model.mass, model.omega[i]))
        cols.append("trajectory_temperature_K")
    formats.write_table(out / "steady_state.csv", cols, rows)
    print(f"phase = {sys_.coupling.phase:.6g} rad, pressure = {sys_.environment.pressure / MBAR:.3g} "
          f"mbar, detuning = {sys_.detuning / TWO_PI:.6g} Hz")
    for r in rows:
        line = f"T_{r[0]} = {r[1]:.6g} K   gamma_c_{r[0]} = {r[2]:.6g} Hz   gamma_{r[0]} = {r[3]:.6g} Hz"
        if len(r) > 4:
            line += f"   T_{r[0]}(trajectory) = {r[4]:.6g} K"
        print(line)
    return {"outputs": ["steady_state.csv"] + (["trace.bin"] if cfg.mode != "oracle" else [])}


def _sweep(variable, runner):
    def cmd(cfg: RunConfig, out: Path, args) -> dict:
        phases = [args.phase] if args.phase is not None else None
        plan = cfg.sweep_plan(variable, phases)
        result = runner(plan, jobs=args.jobs, log=_log)
        files = experiments.emit_report(result, out, subcommand=args.subcommand,
                                        config=emit_config(cfg), seed=cfg.seed)
        lost = sum(not p.stable for p in result.points)
        print(f"{len(result.points)} points ({lost} lost) -> {out}")
        return {"outputs": files}
    return cmd


def cmd_relaxation(cfg: RunConfig, out: Path, args) -> dict:
    phases = [args.phase] if args.phase is not None else None
    plan = cfg.relaxation_plan(phases)
    result = {d: experiments.run_relaxation_ensemble(plan, d, log=_log, jobs=args.jobs)
              for d in ("cooling_on", "cooling_off")}
    files = experiments.emit_report(result, out, subcommand=args.subcommand,
                                    config=emit_config(cfg), seed=cfg.seed)
    for d, series in result.items():
        for s in series:
            for a in AXES:
                f = s.fits[a]
                rate = "n/a" if f is None else f"{f['rate']:.4g} 1/s"
                print(f"{d} phase={s.phase:.4f} {a}: rate {rate}")
    return {"outputs": files}


def cmd_psd(cfg: RunConfig, out: Path, args) -> dict:
    trace = formats.read_trace(args.trace)
    label = args.channel
    if label not in trace.labels:
        raise ConfigError(f"channel {label!r} not in trace (has {list(trace.labels)})")
    seg = args.segment_length or max(256, trace.n_samples // 8)
    sp = analysis.trace_psd(trace, label, seg)
    formats.write_spectrum_csv(out / "psd.csv", sp)
    outputs = ["psd.csv"]
    if label in AXES:
        axis, i = label, AXES.index(label)
        T = analysis.temperature_from_area(sp, cfg.system.mass, cfg.system.omega[i])
        pw = analysis.measure_peak_width(sp, band=(0.5 * cfg.system.omega[i] / TWO_PI,
                                                   1.5 * cfg.system.omega[i] / TWO_PI))
        formats.write_fit_json(out / "peak_fit.json", pw.fit)
        outputs.append("peak_fit.json")
        print(f"T_{axis} = {T:.6g} K   FWHM = {pw.fwhm_direct:.6g} Hz (direct), "
              f"{pw.fwhm_lorentz:.6g} Hz (Lorentzian)")
    print(f"{len(sp.freqs)} bins, rbw = {sp.rbw:.6g} Hz -> {out / 'psd.csv'}")
    return {"outputs": outputs}


COMMANDS = {
    "steady-state": cmd_steady_state,
    "sweep-pressure": _sweep("pressure", experiments.run_pressure_sweep),
    "sweep-detuning": _sweep("detuning", experiments.run_detuning_sweep),
    "sweep-power": _sweep("power", experiments.run_power_sweep),
    "relaxation": cmd_relaxation,
    "psd": cmd_psd,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="levicav", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="subcommand", required=True,
                            metavar="{" + ",".join(SUBCOMMANDS) + "}")
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        if name == "psd":
            p.add_argument("trace", help="binary (.bin) or CSV trace file")
            p.add_argument("--config", default=None, help="configuration (default: bundled)")
            p.add_argument("--channel", default="y", help="trace channel (default: y)")
            p.add_argument("--segment-length", type=int, default=None)
        else:
            p.add_argument("config", nargs="?", default=None,
                           help="JSON configuration or run manifest (default: bundled)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a configuration entry, e.g. environment.pressure_mbar=1e-4")
        p.add_argument("--phase", default=None, help="node, slope, antinode or radians")
        p.add_argument("--jobs", type=int, default=1, help="maximum worker processes")
        p.add_argument("--out", default=None, help="base output directory")
    return ap


def _read_json(path: Path):
    try:
        text = path.read_text()
    except FileNotFoundError as exc:
        raise ConfigError(f"configuration file not found: {path}") from exc
    if not text.strip():
        raise ConfigError(f"{path}: empty configuration; required sections: {list(SECTIONS)}")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def _load(args) -> RunConfig:
    path = Path(args.config) if args.config else default_config_path()
    raw = apply_overrides(_read_json(path), args.set)
    if args.phase is not None:
        try:
            ph = float(args.phase)
        except ValueError:
            ph = args.phase
        raw.setdefault("coupling", {})["phase"] = ph
        # recorded in the sweep section so a manifest rerun covers the same phases
        raw.setdefault("sweep", {})["phases"] = [ph]
        args.phase = _phase("--phase", ph, "rad or node|slope|antinode")
    if os.environ.get(SEED_ENV):
        try:
            raw["seed"] = int(os.environ[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {os.environ[SEED_ENV]!r}") from exc
    if args.out:
        raw["output_dir"] = args.out
    return config_from_dict(raw)


def _error(code, kind, message):
    print(json.dumps({"error": kind, "message": message, "exit_code": code}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load(args)
        out = _run_dir(cfg.output_dir, args.subcommand)
        info = COMMANDS[args.subcommand](cfg, out, args)
        if args.subcommand in ("steady-state", "psd"):
            manifest = {"manifest_version": experiments.MANIFEST_VERSION,
                        "subcommand": args.subcommand, "config": emit_config(cfg),
                        "seed": cfg.seed, "versions": experiments._versions(),
                        "outputs": sorted(info["outputs"])}
            (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    except ConfigError as exc:
        return _error(EXIT_CONFIG, "config", str(exc))
    except InstabilityError as exc:
        return _error(EXIT_INSTABILITY, "instability", str(exc))
    except analysis.AnalysisError as exc:
        return _error(EXIT_ANALYSIS, "analysis", str(exc))
    except (ParameterError, ValueError) as exc:
        return _error(EXIT_CONFIG, "config", str(exc))
    except OSError as exc:
        return _error(EXIT_IO, "io", str(exc))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
