"""Command-line front end: ``ecmtherm <command> [options]``.

Commands read an INI-style config (``--config``) whose keys carry their unit
in the name; ``--set section.key=value`` and command flags override it. Every
output file starts with a header recording the tool version, the command,
the seed and the fully resolved config. Exit codes: 0 success, 1 numerical or
convergence failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import math
import os
import sys

import numpy as np

from . import __version__
from .ecm import CellSpec, CurrentVoltageTrace, EcmState, OcvPolynomial, SocParameterTable, simulate
from .errors import ConfigurationError, FitError, NumericError, SetupError, SolverError, TraceParseError
from .hppc import HppcProfileSpec, generate_profile, load_trace, segment_pulses, write_trace
from .ocv_fit import extract_ocv_points, fit_polynomial
from .param_fit import (DEFAULT_BOUNDS, DEFAULT_BREAKPOINTS, FitProblem, fit, identifiability_report,
                        initial_table_from_trace, midbounds_table)
from .presets import LIFES2_OCV_COEFFICIENTS, lifes2_parameter_table
from .thermal import (FACES, CylMesh, ThermalBoundary, ThermalProps, cosimulate, write_field_csv,
                      write_field_vtk, write_temperature_csv)

EXIT_OK, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2

# (parser, default); None means "unset".
SCHEMA = {
    "cell": {
        "capacity_mah": ("float", 3000.0),
        "nominal_voltage_v": ("float", 1.5),
        "cutoff_voltage_v": ("float", 0.8),
        "coulombic_efficiency": ("float", 1.0),
        "diameter_m": ("float", 14.5e-3),
        "height_m": ("float", 50.5e-3),
        "initial_soc": ("float", 1.0),
    },
    "profile": {
        "amplitude_a": ("float", 1.5),
        "frequency_hz": ("float", 2.8e-3),
        "duty_cycle": ("float", 0.5),
        "duration_s": ("float", 14400.0),
        "sample_interval_s": ("float", 2.5),
        "phase": ("str", "pulse-first"),
    },
    "input": {
        "trace_path": ("path", None),
        "discharge_negative": ("bool", False),
    },
    "model": {
        "table_path": ("path", None),
        "ocv_coefficients": ("floats", LIFES2_OCV_COEFFICIENTS),
        "dt_max_s": ("float", 2.5),
    },
    "simulate": {
        "noise_v": ("float", 0.0),
        "stop_at_cutoff": ("bool", True),
        "plot_script": ("bool", False),
    },
    "fit_ocv": {
        "degree": ("int", 5),
        "threshold_a": ("float", None),
    },
    "fit_params": {
        "breakpoints": ("floats", DEFAULT_BREAKPOINTS),
        "init": ("str", "data"),
        "strategy": ("str", "global"),
        "max_iter": ("int", 500),
        "restarts": ("int", 0),
        "label_swaps": ("int", 6),
        "r_lower_ohm": ("float", DEFAULT_BOUNDS["r_s"][0]),
        "r_upper_ohm": ("float", DEFAULT_BOUNDS["r_s"][1]),
        "c_lower_f": ("float", DEFAULT_BOUNDS["c_1"][0]),
        "c_upper_f": ("float", DEFAULT_BOUNDS["c_1"][1]),
        "identifiability": ("bool", True),
    },
    "thermal": {
        "n_r": ("int", 20),
        "n_z": ("int", 60),
        "tab_layers": ("int", 1),
        "density_kg_m3": ("float", 1800.0),
        "specific_heat_j_kgk": ("float", 1100.0),
        "conductivity_radial_w_mk": ("float", 3.0),
        "conductivity_axial_w_mk": ("float", 30.0),
        "sigma_plus_s_m": ("float", 3.8e7),
        "sigma_minus_s_m": ("float", 6.0e7),
        "entropic_coeff_v_k": ("float", 0.0),
        "h_conv_w_m2k": ("float", 10.0),
        "t_ambient_k": ("float", 295.15),
        "insulated_faces": ("words", ()),
        "dt_thermal_s": ("float", 10.0),
        "dt_ecm_s": ("float", 1.0),
        "capacity_ref_mah": ("float", None),
        "snapshot_every": ("int", 0),
    },
}

COMMAND_SECTIONS = {
    "hppc-gen": ("profile",),
    "simulate": ("cell", "profile", "input", "model", "simulate"),
    "fit-ocv": ("cell", "input", "model", "fit_ocv"),
    "fit-params": ("cell", "input", "model", "fit_params"),
    "thermal": ("cell", "profile", "input", "model", "thermal"),
}


class UsageError(Exception):
    pass


def _parse_value(kind, text, where):
    text = text.strip()
    try:
        if kind == "float":
            value = float(text)
            if not math.isfinite(value):
                raise ValueError
            return value
        if kind == "int":
            return int(text)
        if kind == "bool":
            lowered = text.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if kind == "floats":
            return tuple(float(v) for v in text.replace(",", " ").split())
        if kind == "words":
            return tuple(v for v in text.replace(",", " ").split())
        return text
    except ValueError:
        raise ConfigurationError(f"{where}: cannot read {text!r} as {kind}") from None


def _format_value(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """Resolved ``section -> key -> value`` mapping.

    Relative paths in a config file are taken relative to that file; paths
    from flags are taken relative to the working directory.
    """

    def __init__(self, values):
        self.values = values

    @classmethod
    def load(cls, path=None, overrides=()):
        values = {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}
        base_dir = "."
        raw = []
        if path is not None:
            if not os.path.isfile(path):
                raise ConfigurationError(f"config file not found: {path}")
            parser = configparser.ConfigParser(interpolation=None)
            try:
                with open(path, encoding="utf-8") as fh:
                    parser.read_file(fh)
            except configparser.Error as exc:
                raise ConfigurationError(f"{path}: {exc}") from None
            base_dir = os.path.dirname(path) or "."
            for section in parser.sections():
                for key, text in parser.items(section):
                    if SCHEMA.get(section, {}).get(key, ("",))[0] == "path" and text.strip() \
                            and not os.path.isabs(text.strip()):
                        text = os.path.join(base_dir, text.strip())
                    raw.append((section, key, text, f"{path} [{section}] {key}"))
        for item in overrides:
            name, sep, text = item.partition("=")
            section, dot, key = name.strip().partition(".")
            if not sep or not dot:
                raise ConfigurationError(f"--set expects section.key=value, got {item!r}")
            raw.append((section, key.strip(), text, f"--set {name.strip()}"))
        for section, key, text, where in raw:
            if section not in SCHEMA or key not in SCHEMA[section]:
                raise ConfigurationError(f"{where}: unknown setting {section}.{key}")
            kind = SCHEMA[section][key][0]
            if kind == "path":
                values[section][key] = text.strip() or None
            elif text.strip() == "" and SCHEMA[section][key][1] is None:
                values[section][key] = None
            else:
                values[section][key] = _parse_value(kind, text, where)
        return cls(values)

    def set(self, section, key, value):
        self.values[section][key] = value

    def get(self, section, key):
        return self.values[section][key]

    def path(self, section, key, required=False):
        value = self.values[section][key]
        if value is None:
            if required:
                raise ConfigurationError(f"{section}.{key} is required for this command")
            return None
        if not os.path.isfile(value):
            raise ConfigurationError(f"input file not found: {value}")
        return value

    def lines(self, sections):
        out = []
        for section in sections:
            for key in SCHEMA[section]:
                out.append(f"{section}.{key} = {_format_value(self.values[section][key])}")
        return out

    # --- typed views -------------------------------------------------------

    def cell(self):
        c = self.values["cell"]
        return CellSpec.from_mah(c["capacity_mah"], c["nominal_voltage_v"], c["cutoff_voltage_v"],
                                 c["coulombic_efficiency"], c["diameter_m"], c["height_m"])

    def initial_state(self):
        soc = self.values["cell"]["initial_soc"]
        if not 0.0 <= soc <= 1.0:
            raise ConfigurationError("cell.initial_soc must lie in [0, 1]")
        return EcmState(soc)

    def profile_spec(self):
        p = self.values["profile"]
        return HppcProfileSpec(p["amplitude_a"], p["frequency_hz"], p["duty_cycle"], p["duration_s"],
                               p["sample_interval_s"], p["phase"])

    def table(self):
        path = self.path("model", "table_path")
        if path is None:
            return lifes2_parameter_table()
        with open(path, encoding="utf-8") as fh:
            return SocParameterTable.read_csv(fh)

    def poly(self):
        coeffs = self.values["model"]["ocv_coefficients"]
        if len(coeffs) != 6:
            raise ConfigurationError("model.ocv_coefficients needs six values, highest power first")
        return OcvPolynomial(coeffs)

    def trace(self, required=False):
        path = self.path("input", "trace_path", required)
        if path is None:
            return None
        with open(path, encoding="utf-8") as fh:
            return load_trace(fh, discharge_negative=self.values["input"]["discharge_negative"])

    def bounds(self):
        f = self.values["fit_params"]
        out = {}
        for name in DEFAULT_BOUNDS:
            out[name] = (f["r_lower_ohm"], f["r_upper_ohm"]) if name.startswith("r") else (f["c_lower_f"], f["c_upper_f"])
        return out

    def thermal_setup(self, spec):
        t = self.values["thermal"]
        for face in t["insulated_faces"]:
            if face not in FACES:
                raise ConfigurationError(f"thermal.insulated_faces: unknown face {face!r}")
        props = ThermalProps(t["density_kg_m3"], t["specific_heat_j_kgk"], t["conductivity_radial_w_mk"],
                             t["conductivity_axial_w_mk"], t["sigma_plus_s_m"], t["sigma_minus_s_m"],
                             t["entropic_coeff_v_k"])
        faces = {f: ("insulated" if f in t["insulated_faces"] else "convective") for f in FACES}
        boundary = ThermalBoundary(t["h_conv_w_m2k"], t["t_ambient_k"], faces)
        mesh = CylMesh.for_cell(spec, t["n_r"], t["n_z"], t["tab_layers"])
        return mesh, props, boundary


# --- output helpers ------------------------------------------------------------


class Outputs:
    """Writes files under one directory, all with the same provenance header."""

    def __init__(self, directory, command, seed, config_lines):
        self.directory = directory
        self.header = [f"ecmtherm {__version__} {command}", f"seed = {seed}", "resolved config:"]
        self.header += [f"  {line}" for line in config_lines]
        self.meta = {
            "tool_version": __version__,
            "command": command,
            "seed": seed,
            "resolved_config": "; ".join(config_lines),
        }
        self.written = []
        os.makedirs(directory, exist_ok=True)

    def open(self, name):
        path = os.path.join(self.directory, name)
        self.written.append(path)
        return open(path, "w", encoding="utf-8", newline="\n")

    def json(self, name, payload):
        with self.open(name) as fh:
            json.dump({**self.meta, **payload}, fh, indent=2, sort_keys=True, allow_nan=False)
            fh.write("\n")


def _finite_or_none(value):
    value = float(value)
    return value if math.isfinite(value) else None


def _say(args, text):
    if not args.quiet:
        print(text)


# --- commands ------------------------------------------------------------------


def cmd_hppc_gen(args, cfg, out):
    for flag, key in (("amps", "amplitude_a"), ("freq", "frequency_hz"), ("duty", "duty_cycle"),
                      ("duration", "duration_s"), ("dt", "sample_interval_s"), ("phase", "phase")):
        value = getattr(args, flag)
        if value is not None:
            cfg.set("profile", key, value)
    out = out()
    spec = cfg.profile_spec()
    trace = generate_profile(spec)
    with out.open("profile.csv") as fh:
        write_trace(trace, fh, out.header)
    _say(args, f"period_s = {spec.period:.6f}")
    _say(args, f"pulse_width_s = {spec.pulse_width:.6f}")
    _say(args, f"periods = {spec.n_periods:.4f}")
    _say(args, f"pulses = {spec.n_pulses}")
    _say(args, f"rows = {len(trace)}")
    return EXIT_OK


def _plot_script(csv_name):
    return (
        "set datafile separator ','\n"
        "set key autotitle columnhead\n"
        "set xlabel 'time (s)'\n"
        "set ylabel 'voltage (V)'\n"
        "set y2label 'current (A)'\n"
        "set y2tics\n"
        f"plot '{csv_name}' using 1:3 with lines, '' using 1:2 axes x1y2 with steps\n"
    )


def _profile(cfg):
    """The input trace, or the sampled square wave exactly as ``hppc-gen`` writes it."""
    trace = cfg.trace()
    return trace if trace is not None else generate_profile(cfg.profile_spec())


def cmd_simulate(args, cfg, out):
    spec = cfg.cell()
    profile = _profile(cfg)
    table, poly = cfg.table(), cfg.poly()
    s = cfg.values["simulate"]
    out = out()
    result = simulate(profile, spec, table, poly, cfg.initial_state(), cfg.get("model", "dt_max_s"),
                      stop_at_cutoff=s["stop_at_cutoff"])
    volts = result.trace.voltage
    if s["noise_v"] > 0:
        volts = volts + np.random.default_rng(args.seed).normal(0.0, s["noise_v"], volts.size)
    sim = CurrentVoltageTrace(result.trace.t, result.trace.current, volts)
    with out.open("simulated.csv") as fh:
        write_trace(sim, fh, out.header, {"soc": result.soc})
    summary = {
        "termination": result.termination,
        "t_end_s": float(result.t_end),
        "final_soc": float(result.final_state.soc),
        "min_voltage_v": float(np.min(volts)),
        "n_samples": int(len(sim)),
        "saturated": bool(result.saturated),
    }
    out.json("summary.json", summary)
    if s["plot_script"] or args.plot:
        with out.open("simulated.gp") as fh:
            fh.write("".join(f"# {line}\n" for line in out.header))
            fh.write(_plot_script("simulated.csv"))
    for key in ("termination", "t_end_s", "final_soc", "min_voltage_v"):
        _say(args, f"{key} = {summary[key]}")
    return EXIT_OK


def cmd_fit_ocv(args, cfg, out):
    spec = cfg.cell()
    trace = cfg.trace(required=True)
    f = cfg.values["fit_ocv"]
    seg = segment_pulses(trace, f["threshold_a"])
    samples = extract_ocv_points(trace, seg, spec, cfg.get("cell", "initial_soc"))
    out = out()
    with out.open("ocv_points.csv") as fh:
        fh.write("".join(f"# {line}\n" for line in out.header))
        fh.write("soc,ocv_V,pulse_index\n")
        for p in samples.points:
            fh.write(f"{p.soc!r},{p.ocv!r},{p.source_pulse_index}\n")
    report = fit_polynomial(samples, f["degree"])
    payload = report.to_dict()
    payload.update({"excluded_windows": samples.excluded, "flagged_pulses": list(samples.flagged)})
    out.json("ocv_fit.json", payload)
    _say(args, "coefficients = " + ", ".join(f"{c:.6g}" for c in report.coefficients))
    _say(args, f"r_squared = {report.r_squared:.8f}")
    _say(args, f"residual_rms = {report.residual_rms:.3e}")
    return EXIT_OK


def cmd_fit_params(args, cfg, out):
    spec = cfg.cell()
    trace = cfg.trace(required=True)
    poly = cfg.poly()
    f = cfg.values["fit_params"]
    bounds = cfg.bounds()
    breakpoints = tuple(f["breakpoints"])
    init = f["init"]
    initial_soc = cfg.get("cell", "initial_soc")
    if init == "data":
        start = initial_table_from_trace(trace, poly, spec, breakpoints, bounds, initial_soc)
    elif init == "midbounds":
        start = midbounds_table(breakpoints, bounds)
    elif init == "table":
        start = cfg.table()
    else:
        raise ConfigurationError("fit_params.init must be data, midbounds or table")
    try:
        problem = FitProblem(trace, poly, spec, breakpoints, bounds, start, initial_soc,
                             cfg.get("model", "dt_max_s"), f["max_iter"], f["strategy"], args.seed,
                             f["restarts"], label_swaps=f["label_swaps"])
    except FitError as exc:
        raise ConfigurationError(str(exc)) from None
    out = out()
    result = fit(problem)
    with out.open("fitted_table.csv") as fh:
        result.table.write_csv(fh, out.header)
    payload = result.to_dict()
    payload["per_breakpoint_rms"] = [None if v is None else _finite_or_none(v) for v in result.per_breakpoint_rms]
    payload["initial_rms"] = _finite_or_none(result.initial_rms)
    if f["identifiability"]:
        report = identifiability_report(problem, result)
        payload["weakly_identified"] = [f"{r.breakpoint:.2f}:{r.name}" for r in report if r.weakly_identified]
    out.json("fit_result.json", payload)
    _say(args, f"rms_error_v = {result.rms_error:.6e}")
    _say(args, f"max_error_v = {result.max_error:.6e}")
    _say(args, f"converged = {result.converged}")
    if not result.converged:
        print(f"ecmtherm: fit did not converge: {result.message}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_thermal(args, cfg, out):
    spec = cfg.cell()
    profile = _profile(cfg)
    table, poly = cfg.table(), cfg.poly()
    mesh, props, boundary = cfg.thermal_setup(spec)
    t = cfg.values["thermal"]
    q_ref = None if t["capacity_ref_mah"] is None else t["capacity_ref_mah"] * 3.6
    out = out()
    result = cosimulate(spec, table, poly, profile, mesh, props, boundary, t["dt_thermal_s"],
                        cfg.initial_state(), t["dt_ecm_s"], capacity_ref=q_ref,
                        snapshot_every=t["snapshot_every"] or None)
    with out.open("temperature.csv") as fh:
        write_temperature_csv(result, fh, out.header)
    with out.open("field_final.csv") as fh:
        write_field_csv(result.final, mesh, fh, out.header)
    with out.open("field_final.vtk") as fh:
        write_field_vtk(result.final, mesh, fh, out.header[0])
    for snap in result.snapshots:
        with out.open(f"field_t{snap.t:09.1f}.csv") as fh:
            write_field_csv(snap, mesh, fh, out.header)
    spread = result.t_max - result.t_min
    summary = {
        "termination": result.ecm.termination,
        "t_end_s": float(result.times[-1]),
        "temperature_rise_k": result.temperature_rise,
        "peak_avg_temperature_k": float(result.t_avg.max()),
        "final_spatial_spread_k": result.spatial_spread,
        "max_spatial_spread_k": float(spread.max()),
        "heat_generated_j": float(result.heat.sum()),
        "heat_exchanged_j": float(result.boundary_heat.sum()),
    }
    out.json("thermal_summary.json", summary)
    for key in ("termination", "t_end_s", "temperature_rise_k", "final_spatial_spread_k"):
        _say(args, f"{key} = {summary[key]}")
    return EXIT_OK


COMMANDS = {
    "hppc-gen": cmd_hppc_gen,
    "simulate": cmd_simulate,
    "fit-ocv": cmd_fit_ocv,
    "fit-params": cmd_fit_params,
    "thermal": cmd_thermal,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", help="INI config file")
    common.add_argument("--out", default=".", help="output directory (default: .)")
    common.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    common.add_argument("--quiet", action="store_true", help="suppress summary output")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value; repeatable")
    parser = _Parser(prog="ecmtherm", description="Equivalent-circuit and electro-thermal battery toolkit")
    parser.add_argument("--version", action="version", version=f"ecmtherm {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    gen = sub.add_parser("hppc-gen", parents=[common], help="generate a square-wave HPPC profile")
    gen.add_argument("--amps", type=float, help="pulse amplitude, A")
    gen.add_argument("--freq", type=float, help="pulse frequency, Hz")
    gen.add_argument("--duty", type=float, help="duty cycle in (0, 1)")
    gen.add_argument("--duration", type=float, help="profile length, s")
    gen.add_argument("--dt", type=float, help="sample interval, s")
    gen.add_argument("--phase", choices=("pulse-first", "rest-first"))
    for name, text in (("simulate", "simulate terminal voltage"),
                       ("fit-ocv", "extract OCV points and fit a polynomial"),
                       ("fit-params", "identify the SOC parameter table"),
                       ("thermal", "electro-thermal co-simulation")):
        p = sub.add_parser(name, parents=[common], help=text)
        if name != "hppc-gen":
            p.add_argument("--trace", help="input trace CSV (overrides input.trace_path)")
        if name == "simulate":
            p.add_argument("--plot", action="store_true", help="also write a gnuplot script")
    return parser


class _StderrHandler(logging.StreamHandler):
    """Writes to whatever ``sys.stderr`` is at emit time."""

    @property
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, value):
        pass


def _configure_logging(quiet):
    """Attach the stderr handler; returns a callable that undoes it."""
    logger = logging.getLogger("ecmtherm")
    level = logger.level
    handler = _StderrHandler()
    handler.setFormatter(logging.Formatter("ecmtherm: %(levelname)s: %(message)s"))
    handler.setLevel(logging.ERROR if quiet else logging.WARNING)
    logger.addHandler(handler)
    if level == logging.NOTSET or level > logging.WARNING:
        logger.setLevel(logging.WARNING)

    def restore():
        logger.removeHandler(handler)
        logger.setLevel(level)
    return restore


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"ecmtherm: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    restore = _configure_logging(args.quiet)
    try:
        return _run(args)
    finally:
        restore()


def _run(args):
    if args.seed < 0 or args.seed >= 2 ** 64:
        print("ecmtherm: usage error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = RunConfig.load(args.config, args.set)
        if getattr(args, "trace", None):
            cfg.set("input", "trace_path", args.trace)
        sections = COMMAND_SECTIONS[args.command]

        def outputs():
            return Outputs(args.out, args.command, args.seed, cfg.lines(sections))

        return COMMANDS[args.command](args, cfg, outputs)
    except (ConfigurationError, TraceParseError, SetupError, FileNotFoundError, UsageError) as exc:
        print(f"ecmtherm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FitError, SolverError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"ecmtherm: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
