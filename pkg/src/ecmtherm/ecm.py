"""Two-RC equivalent circuit model of a primary cell.

The model is a voltage source V_OCV(SOC) in series with an ohmic resistance
R_s and two parallel RC branches. All five passive components are looked up
from an SOC-indexed table. Current is positive on discharge.

State update uses the exact solution for piecewise-constant current, with the
parameter lookup frozen at the start of each step::

    v_i <- v_i * exp(-dt/tau_i) + I * R_i * (1 - exp(-dt/tau_i)),  tau_i = R_i C_i
    soc <- soc - eta * I * dt / Q
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigurationError, NumericError

COULOMBS_PER_MAH = 3.6
PARAM_NAMES = ("r_s", "r_1", "r_2", "c_1", "c_2")
TABLE_COLUMNS = ("SOC", "R_s", "R_1", "R_2", "C_1", "C_2")

END_OF_PROFILE = "end_of_profile"
SOC_DEPLETED = "soc_depleted"
CUTOFF_VOLTAGE = "cutoff_voltage"


def _readonly(values, dtype=float):
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class CellSpec:
    """Static cell constants. Capacity is stored in coulombs."""

    nominal_capacity: float
    nominal_voltage: float
    cutoff_voltage: float
    coulombic_efficiency: float = 1.0
    diameter: float = 14.5e-3
    height: float = 50.5e-3

    def __post_init__(self):
        if not self.nominal_capacity > 0:
            raise ConfigurationError("nominal_capacity must be positive")
        if not self.cutoff_voltage < self.nominal_voltage:
            raise ConfigurationError("cutoff_voltage must be below nominal_voltage")
        if not 0 < self.coulombic_efficiency <= 1:
            raise ConfigurationError("coulombic_efficiency must lie in (0, 1]")
        if not (self.diameter > 0 and self.height > 0):
            raise ConfigurationError("cell dimensions must be positive")

    @classmethod
    def from_mah(cls, capacity_mah, nominal_voltage, cutoff_voltage,
                 coulombic_efficiency=1.0, diameter=14.5e-3, height=50.5e-3):
        return cls(capacity_mah * COULOMBS_PER_MAH, nominal_voltage, cutoff_voltage,
                   coulombic_efficiency, diameter, height)

    @property
    def capacity_mah(self):
        return self.nominal_capacity / COULOMBS_PER_MAH

    @property
    def radius(self):
        return 0.5 * self.diameter

    @property
    def volume(self):
        return math.pi * self.radius ** 2 * self.height


class RcParams(NamedTuple):
    r_s: float
    r_1: float
    r_2: float
    c_1: float
    c_2: float


@dataclass(frozen=True, eq=False)
class SocParameterTable:
    """Piecewise-linear lookup of the five passive components versus SOC."""

    soc: np.ndarray
    r_s: np.ndarray
    r_1: np.ndarray
    r_2: np.ndarray
    c_1: np.ndarray
    c_2: np.ndarray

    def __post_init__(self):
        for name in ("soc",) + PARAM_NAMES:
            object.__setattr__(self, name, _readonly(getattr(self, name)))
        n = self.soc.size
        if self.soc.ndim != 1 or n < 2:
            raise ConfigurationError("parameter table needs at least 2 breakpoints")
        for name in PARAM_NAMES:
            if getattr(self, name).shape != (n,):
                raise ConfigurationError(f"column {name} has the wrong length")
        if not np.all(np.isfinite(self.matrix())) or not np.all(np.isfinite(self.soc)):
            raise ConfigurationError("parameter table contains non-finite values")
        if np.any(np.diff(self.soc) <= 0):
            raise ConfigurationError("breakpoints must be strictly ascending")
        if self.soc[0] < 0 or self.soc[-1] > 1:
            raise ConfigurationError("breakpoints must lie in [0, 1]")
        if np.any(self.r_s < 0) or np.any(self.r_1 < 0) or np.any(self.r_2 < 0):
            raise ConfigurationError("resistances must be non-negative")
        if np.any(self.c_1 <= 0) or np.any(self.c_2 <= 0):
            raise ConfigurationError("capacitances must be positive")

    @classmethod
    def from_rows(cls, rows):
        """Build from ``(soc, r_s, r_1, r_2, c_1, c_2)`` rows."""
        arr = np.asarray(rows, dtype=float)
        if arr.ndim != 2 or arr.shape[1] != 6:
            raise ConfigurationError("rows must have 6 columns")
        return cls(*arr.T)

    @classmethod
    def from_matrix(cls, soc, matrix):
        matrix = np.asarray(matrix, dtype=float)
        return cls(soc, *matrix.T)

    def matrix(self):
        """Parameters as an ``(n_breakpoints, 5)`` array in ``PARAM_NAMES`` order."""
        return np.column_stack([getattr(self, name) for name in PARAM_NAMES])

    def row(self, i):
        return RcParams(*(float(getattr(self, name)[i]) for name in PARAM_NAMES))

    def __len__(self):
        return self.soc.size

    @classmethod
    def read_csv(cls, stream):
        """Read the ``SOC,R_s,R_1,R_2,C_1,C_2`` layout; ``#`` lines are skipped."""
        lines = (line for line in stream if line.strip() and not line.lstrip().startswith("#"))
        reader = csv.reader(lines)
        header = [h.strip() for h in next(reader)]
        if tuple(header) != TABLE_COLUMNS:
            raise ConfigurationError(f"expected columns {TABLE_COLUMNS}, got {tuple(header)}")
        try:
            rows = [[float(x) for x in row] for row in reader if row]
        except ValueError as exc:
            raise ConfigurationError(f"non-numeric table entry: {exc}") from None
        return cls.from_rows(rows)

    def write_csv(self, stream, header_lines=()):
        for line in header_lines:
            stream.write(f"# {line}\n")
        stream.write(",".join(TABLE_COLUMNS) + "\n")
        for i in range(len(self)):
            values = [self.soc[i], *self.row(i)]
            stream.write(",".join(repr(float(v)) for v in values) + "\n")


def interpolation_weights(breakpoints, soc):
    """Left bracket index and linear weight for each ``soc``.

    SOC outside the breakpoint range clamps to the nearest end row.
    """
    bp = np.asarray(breakpoints, dtype=float)
    s = np.clip(np.asarray(soc, dtype=float), bp[0], bp[-1])
    lo = np.clip(np.searchsorted(bp, s, side="right") - 1, 0, bp.size - 2)
    w = (s - bp[lo]) / (bp[lo + 1] - bp[lo])
    return lo, w


def _lerp_columns(matrix, lo, w):
    f0 = matrix[lo]
    f1 = matrix[lo + 1]
    w = np.asarray(w)[..., None]
    out = f0 + w * (f1 - f0)
    out = np.where(w >= 1.0, f1, out)
    return np.clip(out, np.minimum(f0, f1), np.maximum(f0, f1))


def interpolate_columns(table, soc):
    """Vectorised lookup: returns an ``(len(soc), 5)`` array."""
    lo, w = interpolation_weights(table.soc, soc)
    return _lerp_columns(table.matrix(), np.atleast_1d(lo), np.atleast_1d(w))


def interpolate_params(table, soc):
    """Piecewise-linear lookup of ``(R_s, R_1, R_2, C_1, C_2)`` at ``soc``."""
    if len(table) < 2:
        raise ConfigurationError("parameter table needs at least 2 breakpoints")
    if not math.isfinite(soc):
        raise NumericError("soc must be finite")
    return RcParams(*interpolate_columns(table, [soc])[0].tolist())


def clamp_soc(soc):
    """Return ``(clamped_soc, was_clamped)``."""
    clamped = min(max(soc, 0.0), 1.0)
    return clamped, clamped != soc


@dataclass(frozen=True)
class OcvPolynomial:
    """Open-circuit voltage as a degree-5 polynomial in SOC, highest power first."""

    coefficients: tuple

    def __post_init__(self):
        coeffs = tuple(float(c) for c in self.coefficients)
        if len(coeffs) != 6:
            raise ConfigurationError("OCV polynomial needs exactly 6 coefficients")
        if not all(math.isfinite(c) for c in coeffs):
            raise ConfigurationError("OCV coefficients must be finite")
        object.__setattr__(self, "coefficients", coeffs)
        grid = self(np.linspace(0.0, 1.0, 1001))
        if grid.min() < 0.0 or grid.max() > 5.0:
            raise ConfigurationError("OCV polynomial leaves [0, 5] V on SOC in [0, 1]")

    def __call__(self, soc):
        s = np.clip(soc, 0.0, 1.0)
        acc = np.zeros_like(s, dtype=float) if np.ndim(s) else 0.0
        for c in self.coefficients:
            acc = acc * s + c
        return acc

    def evaluate(self, soc):
        """Return ``(volts, soc_was_clamped)`` for a scalar SOC."""
        s, clamped = clamp_soc(float(soc))
        return float(self(s)), clamped


def ocv_eval(poly, soc):
    """Open-circuit voltage at ``soc`` (clamped to [0, 1]), by Horner's rule."""
    return poly.evaluate(soc)[0]


@dataclass(frozen=True)
class EcmState:
    soc: float
    v1: float = 0.0
    v2: float = 0.0
    t: float = 0.0
    saturated: bool = False

    def __post_init__(self):
        soc, clamped = clamp_soc(float(self.soc))
        object.__setattr__(self, "soc", soc)
        if clamped:
            object.__setattr__(self, "saturated", True)


@dataclass(frozen=True, eq=False)
class CurrentVoltageTrace:
    """Sampled ``(t, I, V)`` records. ``voltage`` is None for pure current profiles."""

    t: np.ndarray
    current: np.ndarray
    voltage: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "t", _readonly(self.t))
        object.__setattr__(self, "current", _readonly(self.current))
        if self.voltage is not None:
            object.__setattr__(self, "voltage", _readonly(self.voltage))
        n = self.t.size
        if self.t.ndim != 1 or n == 0:
            raise ValueError("trace must contain at least one sample")
        if self.current.shape != (n,) or (self.voltage is not None and self.voltage.shape != (n,)):
            raise ValueError("trace columns must have equal length")
        if np.any(np.diff(self.t) <= 0):
            raise ValueError("trace timestamps must be strictly increasing")

    def __len__(self):
        return self.t.size

    def with_voltage(self, voltage):
        return CurrentVoltageTrace(self.t, self.current, voltage)


def _check_finite(*values):
    if not all(math.isfinite(v) for v in values):
        raise NumericError("non-finite input to the circuit equations")


def state_derivatives(state, current, spec, table):
    """Right-hand side ``(dsoc/dt, dv1/dt, dv2/dt)`` of the circuit ODEs."""
    _check_finite(state.soc, state.v1, state.v2, current)
    p = interpolate_params(table, state.soc)
    _check_finite(*p)
    dsoc = -spec.coulombic_efficiency * current / spec.nominal_capacity
    dv1 = -state.v1 / (p.r_1 * p.c_1) + current / p.c_1
    dv2 = -state.v2 / (p.r_2 * p.c_2) + current / p.c_2
    return dsoc, dv1, dv2


def terminal_voltage(state, current, poly, table):
    p = interpolate_params(table, state.soc)
    return ocv_eval(poly, state.soc) - state.v1 - state.v2 - p.r_s * current


def rc_update(v, current, r, c, dt):
    """Exact RC branch voltage after ``dt`` under constant ``current``."""
    tau = r * c
    if tau == 0.0:
        return current * r
    decay = math.exp(-dt / tau)
    return v * decay - current * r * math.expm1(-dt / tau)


def step(state, current, dt, spec, table):
    """Advance ``state`` by ``dt`` seconds of constant ``current``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    _check_finite(state.soc, state.v1, state.v2, current, dt)
    p = interpolate_params(table, state.soc)
    v1 = rc_update(state.v1, current, p.r_1, p.c_1, dt)
    v2 = rc_update(state.v2, current, p.r_2, p.c_2, dt)
    soc = state.soc - spec.coulombic_efficiency * current * dt / spec.nominal_capacity
    soc, clamped = clamp_soc(soc)
    return EcmState(soc, v1, v2, state.t + dt, state.saturated or clamped)


# --- whole-profile integration -------------------------------------------------


def _profile_knots(profile):
    """Sample times, discontinuity times and a current lookup for ``profile``.

    ``profile`` is either a :class:`CurrentVoltageTrace` (zero-order hold on
    samples) or any object with ``sample_times()``, ``edge_times()`` and a
    vectorised ``current_at(t)``.
    """
    if isinstance(profile, CurrentVoltageTrace):
        t = profile.t
        current = profile.current

        def lookup(x):
            idx = np.searchsorted(t, x, side="right") - 1
            return current[np.clip(idx, 0, t.size - 1)]

        return t, np.empty(0), lookup
    samples = np.asarray(profile.sample_times(), dtype=float)
    return samples, np.asarray(profile.edge_times(), dtype=float), profile.current_at


@dataclass(frozen=True, eq=False)
class StepHistory:
    """Internal sub-step record of a simulation.

    Arrays indexed by step have length ``n``; those indexed by boundary have
    length ``n + 1``. Parameters are the frozen step-start lookups.
    """

    bounds: np.ndarray
    current: np.ndarray
    soc: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    params: np.ndarray

    @property
    def dt(self):
        return np.diff(self.bounds)

    def dissipated_energy(self):
        """Exact energy ``int I (V_OCV - V) dt`` released over each sub-step, J."""
        dt = self.dt
        i = self.current
        r_s, r_1, r_2, c_1, c_2 = self.params.T
        energy = i * i * r_s * dt
        for v0, r, c in ((self.v1[:-1], r_1, c_1), (self.v2[:-1], r_2, c_2)):
            tau = r * c
            with np.errstate(divide="ignore", invalid="ignore"):
                g = -np.expm1(-dt / tau)
                mean_part = np.where(tau > 0, tau * g, 0.0)
            # integral of v over the step: v0*tau*g + I*R*(dt - tau*g)
            energy = energy + i * (v0 * mean_part + i * r * (dt - mean_part))
        return energy

    def charge(self):
        return self.current * self.dt


@dataclass(frozen=True, eq=False)
class SimulationResult:
    trace: CurrentVoltageTrace
    soc: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    ocv: np.ndarray
    termination: str
    t_end: float
    final_state: EcmState
    saturated: bool
    history: StepHistory


def _rc_recurrence(v0, decay, drive):
    out = [v0]
    v = v0
    for a, b in zip(decay.tolist(), drive.tolist()):
        v = v * a + b
        out.append(v)
    return np.array(out)


def build_step_grid(profile, dt_max, extra_times=()):
    """Step boundaries, per-step current and output indices for ``profile``."""
    if not dt_max > 0:
        raise ValueError("dt_max must be positive")
    samples, edges, lookup = _profile_knots(profile)
    if samples.size == 0:
        raise ValueError("profile is empty")
    t0, t1 = samples[0], samples[-1]
    extra = np.asarray(extra_times, dtype=float)
    knots = np.concatenate([samples, edges[(edges > t0) & (edges < t1)],
                            extra[(extra > t0) & (extra < t1)]])
    knots = np.unique(knots)
    if knots.size == 1:
        bounds = knots
    else:
        widths = np.diff(knots)
        pieces = np.maximum(np.ceil(widths / dt_max - 1e-12), 1).astype(int)
        starts = np.repeat(knots[:-1], pieces)
        offsets = np.concatenate([np.arange(m) / m for m in pieces]) if pieces.size else np.empty(0)
        bounds = np.append(starts + offsets * np.repeat(widths, pieces), knots[-1])
    mids = 0.5 * (bounds[:-1] + bounds[1:])
    step_current = np.asarray(lookup(mids), dtype=float) if mids.size else np.empty(0)
    out_index = np.searchsorted(bounds, samples)
    out_current = np.asarray(lookup(samples), dtype=float)
    return bounds, step_current, out_index, out_current, samples


def simulate(profile, spec, table, poly, initial=None, dt_max=1.0, extra_times=(),
             stop_at_cutoff=True):
    """Simulate the terminal voltage under ``profile``.

    Parameters
    ----------
    profile : CurrentVoltageTrace or profile spec
        Traces are held constant between samples; profile specs (see
        :class:`ecmtherm.hppc.HppcProfileSpec`) are integrated exactly across
        their edges.
    spec, table, poly
        Cell constants, parameter table and OCV polynomial.
    initial : EcmState, optional
        Defaults to a fully charged, relaxed cell.
    dt_max : float
        Longest internal step, seconds.
    extra_times : sequence of float
        Additional step boundaries (used by the thermal co-simulation).

    Returns
    -------
    SimulationResult
        Voltage is reported at every profile sample up to termination. The
        run stops when the SOC reaches zero or, if ``stop_at_cutoff``, when the
        terminal voltage falls below the cutoff voltage.
    """
    if initial is None:
        initial = EcmState(1.0)
    bounds, current, out_index, out_current, samples = build_step_grid(profile, dt_max, extra_times)
    if not np.all(np.isfinite(current)) or not np.all(np.isfinite(out_current)):
        raise NumericError("profile current is not finite")
    eta_q = spec.coulombic_efficiency / spec.nominal_capacity
    dt = np.diff(bounds)
    soc_raw = initial.soc - eta_q * np.concatenate([[0.0], np.cumsum(current * dt)])

    termination = END_OF_PROFILE
    n_steps = dt.size
    t_cross = None
    below = np.nonzero(soc_raw[1:] <= 0.0)[0]
    below = below[current[below] > 0] if below.size else below
    if below.size and initial.soc > 0:
        j = int(below[0])
        termination = SOC_DEPLETED
        t_cross = bounds[j] + soc_raw[j] / (eta_q * current[j])
        t_cross = min(max(t_cross, bounds[j]), bounds[j + 1])
        n_steps = j + 1 if soc_raw[j + 1] == 0.0 else j
    elif initial.soc <= 0 and np.any(current > 0):
        termination = SOC_DEPLETED
        t_cross = bounds[0]
        n_steps = 0

    soc = np.clip(soc_raw[: n_steps + 1], 0.0, 1.0)
    saturated = initial.saturated or bool(np.any(soc != soc_raw[: n_steps + 1]))
    params = interpolate_columns(table, soc[:-1]) if n_steps else np.empty((0, 5))
    cur = current[:n_steps]
    dts = dt[:n_steps]
    with np.errstate(divide="ignore", over="ignore", invalid="ignore"):
        branches = []
        for v0, r, c in ((initial.v1, params[:, 1], params[:, 3]),
                         (initial.v2, params[:, 2], params[:, 4])):
            tau = r * c
            x = -dts / tau
            decay = np.where(tau > 0, np.exp(x), 0.0)
            drive = np.where(tau > 0, -cur * r * np.expm1(x), cur * r)
            branches.append(_rc_recurrence(float(v0), decay, drive))
    v1, v2 = branches
    if not (np.all(np.isfinite(v1)) and np.all(np.isfinite(v2))):
        raise NumericError("branch voltages became non-finite")

    keep = out_index <= n_steps
    k_idx = out_index[keep]
    out_soc = soc[k_idx]
    out_v1 = v1[k_idx]
    out_v2 = v2[k_idx]
    out_i = out_current[keep]
    ocv = poly(out_soc)
    r_s_out = interpolate_columns(table, out_soc)[:, 0] if out_soc.size else np.empty(0)
    volts = ocv - out_v1 - out_v2 - r_s_out * out_i

    n_out = out_soc.size
    if stop_at_cutoff:
        low = np.nonzero(volts < spec.cutoff_voltage)[0]
        if low.size:
            n_out = int(low[0]) + 1
            termination = CUTOFF_VOLTAGE
            t_cross = None
    if n_out == 0:
        raise ValueError("simulation produced no samples")

    h_bounds = bounds[: n_steps + 1]
    h_current = current[:n_steps]
    h_soc, h_v1, h_v2 = soc[: n_steps + 1], v1[: n_steps + 1], v2[: n_steps + 1]
    h_params = params[:n_steps]
    if termination == SOC_DEPLETED:
        t_end = float(t_cross)
        state = EcmState(float(soc[n_steps]), float(v1[n_steps]), float(v2[n_steps]),
                         float(bounds[n_steps]), saturated)
        if t_end > state.t:
            i_last = float(current[n_steps])
            state = step(state, i_last, t_end - state.t, spec, table)
            h_bounds = np.append(h_bounds, t_end)
            h_current = np.append(h_current, i_last)
            h_soc = np.append(h_soc, 0.0)
            h_v1 = np.append(h_v1, state.v1)
            h_v2 = np.append(h_v2, state.v2)
            h_params = np.vstack([h_params, interpolate_columns(table, [soc[n_steps]])])
        final = EcmState(0.0, state.v1, state.v2, t_end, state.saturated)
    else:
        last = int(k_idx[n_out - 1])
        t_end = float(bounds[last])
        final = EcmState(float(soc[last]), float(v1[last]), float(v2[last]), t_end, saturated)
        h_bounds, h_current, h_params = bounds[: last + 1], current[:last], params[:last]
        h_soc, h_v1, h_v2 = soc[: last + 1], v1[: last + 1], v2[: last + 1]

    trace = CurrentVoltageTrace(samples[keep][:n_out], out_i[:n_out], volts[:n_out])
    history = StepHistory(h_bounds, h_current, h_soc, h_v1, h_v2, h_params)
    return SimulationResult(trace, out_soc[:n_out], out_v1[:n_out], out_v2[:n_out],
                            ocv[:n_out], termination, t_end, final, saturated, history)
