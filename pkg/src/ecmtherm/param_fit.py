"""Identification of the SOC-indexed parameter table from a measured trace.

The fit minimises ``sum((V_sim - V_meas)**2)`` over the five components at
every breakpoint with a bounded trust-region least-squares solver working on
log-parameters. The SOC trajectory depends only on the measured current, so
it and the interpolation weights are computed once per problem.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .ecm import (PARAM_NAMES, EcmState, SocParameterTable, _lerp_columns, build_step_grid,
                  interpolation_weights, simulate)
from .errors import FitError
from .hppc import segment_pulses
from .ocv_fit import coulomb_counted_soc

log = logging.getLogger(__name__)

DEFAULT_BREAKPOINTS = tuple(round(0.05 * k, 2) for k in range(1, 21))
DEFAULT_BOUNDS = {
    "r_s": (1e-6, 10.0),
    "r_1": (1e-6, 10.0),
    "r_2": (1e-6, 10.0),
    "c_1": (1.0, 1e5),
    "c_2": (1.0, 1e5),
}
SENTINEL = 1.0  # V, residual for samples past an early termination
DEFAULT_DT_MAX = 2.5


@dataclass(frozen=True, eq=False)
class FitProblem:
    """Everything needed to identify a parameter table from one trace.

    ``initial_table`` of None means the column-wise geometric mid-bounds.
    ``strategy`` is ``"global"`` (joint fit of every parameter) or
    ``"block"`` (per-breakpoint fits on their own pulse windows, then a
    global polish). With ``data_start`` the fit also runs from the
    data-driven table of :func:`initial_table_from_trace` and keeps the
    lower-cost outcome; ``initial_table`` stays the incumbent. Branch
    labels are ambiguous where one branch fades, so ``label_swaps`` further
    starts exchange branches 1 and 2 on the last 1, 2, ... visited
    breakpoints of that table. The lowest-cost fit wins.
    """

    trace: object
    poly: object
    spec: object
    breakpoints: tuple = DEFAULT_BREAKPOINTS
    bounds: dict = field(default_factory=lambda: dict(DEFAULT_BOUNDS))
    initial_table: SocParameterTable | None = None
    initial_soc: float = 1.0
    dt_max: float = DEFAULT_DT_MAX
    max_iter: int = 500
    strategy: str = "global"
    seed: int = 0
    restarts: int = 0
    data_start: bool = True
    label_swaps: int = 6

    def __post_init__(self):
        if self.trace.voltage is None:
            raise FitError("measured trace has no voltage column")
        bp = np.asarray(self.breakpoints, dtype=float)
        if bp.size < 2 or np.any(np.diff(bp) <= 0):
            raise FitError("breakpoints must be strictly ascending with at least 2 entries")
        for name in PARAM_NAMES:
            lo, hi = self.bounds[name]
            if not 0 < lo < hi:
                raise FitError(f"bounds for {name} must satisfy 0 < lower < upper")
        if self.label_swaps < 0 or self.restarts < 0:
            raise FitError("label_swaps and restarts must be non-negative")
        if self.strategy not in ("global", "block"):
            raise FitError(f"unknown strategy {self.strategy!r}")
        if self.initial_table is not None and not np.array_equal(self.initial_table.soc, bp):
            raise FitError("initial table breakpoints differ from the problem breakpoints")

    @property
    def lower(self):
        return np.array([self.bounds[n][0] for n in PARAM_NAMES])

    @property
    def upper(self):
        return np.array([self.bounds[n][1] for n in PARAM_NAMES])

    def start_table(self):
        if self.initial_table is not None:
            return self.initial_table
        return midbounds_table(self.breakpoints, self.bounds)


@dataclass(frozen=True, eq=False)
class FitResult:
    table: SocParameterTable
    rms_error: float
    max_error: float
    iterations: int
    converged: bool
    per_breakpoint_rms: tuple
    initial_rms: float = float("nan")
    truncated: bool = False
    message: str = ""

    def to_dict(self):
        return {
            "rms_error": float(self.rms_error),
            "max_error": float(self.max_error),
            "initial_rms": float(self.initial_rms),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "truncated": bool(self.truncated),
            "message": self.message,
            "per_breakpoint_rms": [None if v is None else float(v) for v in self.per_breakpoint_rms],
        }


def midbounds_table(breakpoints, bounds=None):
    bounds = bounds or DEFAULT_BOUNDS
    mid = [np.sqrt(bounds[n][0] * bounds[n][1]) for n in PARAM_NAMES]
    return SocParameterTable.from_matrix(breakpoints, np.tile(mid, (len(breakpoints), 1)))


def _linear_recurrence(a, d, cum, first, last):
    """``s[n+1] = a[n] s[n] + d[n]``, ``s[0] = 0``, with ``d`` zero outside ``[first, last]``.

    Past ``last`` the solution only decays, so it is taken from the
    cumulative log-decay ``cum`` instead of the loop.
    """
    s = np.zeros(a.size + 1)
    v = 0.0
    seg = []
    append = seg.append
    for aa, dd in zip(a[first:last + 1].tolist(), d[first:last + 1].tolist()):
        v = v * aa + dd
        append(v)
    s[first + 1:last + 2] = seg
    s[last + 2:] = v * np.exp(cum[last + 2:] - cum[last + 1])
    return s


class _Evaluator:
    """Fast repeated simulation of one trace under varying parameter matrices.

    Reproduces :func:`ecmtherm.ecm.simulate` (with cutoff detection) on the
    trace's own sample grid.
    """

    def __init__(self, problem):
        trace = problem.trace
        spec = problem.spec
        self.spec = spec
        self.breakpoints = np.asarray(problem.breakpoints, dtype=float)
        bounds, current, out_index, out_current, _ = build_step_grid(trace, problem.dt_max)
        dt = np.diff(bounds)
        eta_q = spec.coulombic_efficiency / spec.nominal_capacity
        soc_raw = problem.initial_soc - eta_q * np.concatenate([[0.0], np.cumsum(current * dt)])
        # reuse simulate() for the table-independent SOC termination logic
        probe = simulate(trace, spec, problem.start_table(), problem.poly,
                         EcmState(problem.initial_soc), problem.dt_max, stop_at_cutoff=False)
        self.n_out = len(probe.trace)
        self.n_total = len(trace)
        n_steps = int(out_index[self.n_out - 1])
        soc = np.clip(soc_raw[: n_steps + 1], 0.0, 1.0)
        self.step_lo, self.step_w = interpolation_weights(self.breakpoints, soc[:-1])
        self.dt = dt[:n_steps]
        self.current = current[:n_steps]
        self.out_index = out_index[: self.n_out]
        self.out_current = out_current[: self.n_out]
        out_soc = soc[self.out_index]
        self.out_lo, self.out_w = interpolation_weights(self.breakpoints, out_soc)
        self.out_soc = out_soc
        self.ocv = problem.poly(out_soc)
        self.measured = trace.voltage
        self.v0 = (0.0, 0.0)

    def _branch(self, r, c):
        tau = r * c
        x = -self.dt / tau
        decay = np.exp(x).tolist()
        drive = (-self.current * r * np.expm1(x)).tolist()
        v = 0.0
        out = [v]
        append = out.append
        for a, b in zip(decay, drive):
            v = v * a + b
            append(v)
        return np.array(out)

    def visit_order(self):
        """Indices of the breakpoints the trace touches, by first visit."""
        first = {}
        for n, lo in enumerate(self.step_lo.tolist()):
            for row, w in ((lo, 1.0 - self.step_w[n]), (lo + 1, self.step_w[n])):
                if w > 0 and row not in first:
                    first[row] = n
        return np.array(sorted(first, key=first.get), dtype=int)

    def _sensitivities(self, r, c, r_tab, c_tab):
        """``dv/dlog`` of the branch voltage w.r.t. each table row's R and C; shape (n_steps + 1, 2, n_rows)."""
        x = -self.dt / (r * c)
        a = np.exp(x)
        v = self._branch(r, c)[:-1]
        i = self.current
        # derivatives of (a, b) w.r.t. log R and log C of the interpolated step values
        drive_r = -x * a * v - i * r * np.expm1(x) + i * r * x * a
        drive_c = -x * a * v + i * r * x * a
        cum = np.concatenate([[0.0], np.cumsum(x)])
        n_rows = len(self.breakpoints)
        out = np.zeros((x.size + 1, 2, n_rows))
        steps = np.arange(x.size)
        for row in range(n_rows):
            weight = np.where(self.step_lo == row, 1.0 - self.step_w, 0.0) \
                + np.where(self.step_lo + 1 == row, self.step_w, 0.0)
            support = steps[weight != 0.0]
            if support.size == 0:
                continue
            for k, (drive, tab, val) in enumerate(((drive_r, r_tab, r), (drive_c, c_tab, c))):
                d = drive * weight * tab[row] / val
                out[:, k, row] = _linear_recurrence(a, d, cum, support[0], support[-1])
        return out

    def jacobian(self, matrix):
        """``d(residual)/d(log matrix)`` as ``(n_total, n_rows * 5)``; rows past a cutoff are zero."""
        p = _lerp_columns(matrix, self.step_lo, self.step_w)
        n_rows = matrix.shape[0]
        jac = np.zeros((self.n_total, n_rows, 5))
        n_valid = self.voltages(matrix)[1]
        keep = self.out_index[:n_valid]
        for branch, (ri, ci) in enumerate(((1, 3), (2, 4))):
            sens = self._sensitivities(p[:, ri], p[:, ci], matrix[:, ri], matrix[:, ci])[keep]
            jac[:n_valid, :, ri] = -sens[:, 0]
            jac[:n_valid, :, ci] = -sens[:, 1]
        for lo_shift, weight in ((0, 1.0 - self.out_w), (1, self.out_w)):
            rows = self.out_lo[:n_valid] + lo_shift
            ok = rows < n_rows
            idx = np.flatnonzero(ok)
            jac[idx, rows[ok], 0] -= (self.out_current[:n_valid] * weight[:n_valid])[ok] * matrix[rows[ok], 0]
        return jac.reshape(self.n_total, n_rows * 5)

    def voltages(self, matrix):
        """Simulated voltage at every kept sample and the cutoff truncation point."""
        p = _lerp_columns(matrix, self.step_lo, self.step_w)
        v1 = self._branch(p[:, 1], p[:, 3])[self.out_index]
        v2 = self._branch(p[:, 2], p[:, 4])[self.out_index]
        r_s = _lerp_columns(matrix[:, :1], self.out_lo, self.out_w)[:, 0]
        volts = self.ocv - v1 - v2 - r_s * self.out_current
        low = np.flatnonzero(volts < self.spec.cutoff_voltage)
        n_valid = int(low[0]) + 1 if low.size else volts.size
        return volts, n_valid

    def residuals(self, matrix):
        volts, n_valid = self.voltages(matrix)
        res = np.full(self.n_total, SENTINEL)
        res[:n_valid] = volts[:n_valid] - self.measured[:n_valid]
        return res, n_valid < self.n_total


def residuals(problem, table, full_output=False):
    """``V_sim - V_meas`` at every measured sample.

    Samples after an early termination of the simulation carry ``SENTINEL``.
    With ``full_output`` the truncation flag is returned as well.
    """
    sim = simulate(problem.trace, problem.spec, table, problem.poly,
                   EcmState(problem.initial_soc), problem.dt_max)
    n = len(sim.trace)
    res = np.full(len(problem.trace), SENTINEL)
    res[:n] = sim.trace.voltage - problem.trace.voltage[:n]
    truncated = n < len(problem.trace)
    if truncated:
        log.warning("simulation ended at sample %d of %d (%s)", n, len(problem.trace), sim.termination)
    return (res, truncated) if full_output else res


def _nearest_breakpoint(breakpoints, soc):
    bp = np.asarray(breakpoints)
    return np.abs(np.asarray(soc)[:, None] - bp[None, :]).argmin(axis=1)


def _summarise(problem, evaluator, matrix, iterations, converged, initial_rms, message):
    res, truncated = evaluator.residuals(matrix)
    rms = float(np.sqrt(np.mean(res ** 2)))
    sample_soc = np.concatenate([evaluator.out_soc,
                                 np.full(res.size - evaluator.out_soc.size, evaluator.out_soc[-1])])
    owner = _nearest_breakpoint(problem.breakpoints, sample_soc)
    per_bp = []
    for b in range(len(problem.breakpoints)):
        sel = res[owner == b]
        per_bp.append(float(np.sqrt(np.mean(sel ** 2))) if sel.size else None)
    table = SocParameterTable.from_matrix(problem.breakpoints, matrix)
    return FitResult(table, rms, float(np.abs(res).max()), iterations, converged,
                     tuple(per_bp), initial_rms, truncated, message)


def _solve(evaluator, matrix, free, lower, upper, max_iter, rows=None):
    """Trust-region least squares over ``log(matrix[free])``; returns (matrix, nfev, status)."""
    log_lo, log_hi = np.log(lower[free]), np.log(upper[free])
    x0 = np.clip(np.log(matrix[free]), log_lo, log_hi)
    work = matrix.copy()
    cols = np.flatnonzero(free.ravel())

    def decode(x):
        work[free] = np.exp(x)
        return work

    def fun(x):
        res = evaluator.residuals(decode(x))[0]
        return res if rows is None else res[rows]

    def jac(x):
        full = evaluator.jacobian(decode(x))[:, cols]
        return full if rows is None else full[rows]

    sol = least_squares(fun, x0, jac=jac, bounds=(log_lo, log_hi), method="trf",
                        ftol=1e-8, xtol=1e-8, gtol=1e-10, max_nfev=max_iter, x_scale=1.0)
    out = matrix.copy()
    if sol.cost <= 0.5 * float(np.sum(fun(x0) ** 2)):
        out[free] = np.clip(np.exp(sol.x), lower[free], upper[free])
    return out, sol.nfev, sol.status


def fit(problem):
    """Identify the parameter table. See :class:`FitProblem` for options.

    The returned table is never worse (in rms error) than the starting table.
    Raises :class:`FitError` when the starting point gives a non-finite cost.
    """
    evaluator = _Evaluator(problem)
    lower = np.broadcast_to(problem.lower, (len(problem.breakpoints), 5))
    upper = np.broadcast_to(problem.upper, (len(problem.breakpoints), 5))
    start = np.clip(problem.start_table().matrix(), lower, upper)
    res0, _ = evaluator.residuals(start)
    if not np.all(np.isfinite(res0)):
        raise FitError("non-finite cost at the initial table; widen the bounds or change the start")
    initial_rms = float(np.sqrt(np.mean(res0 ** 2)))
    if problem.max_iter <= 0:
        return _summarise(problem, evaluator, start, 0, False, initial_rms, "iteration cap is zero")

    starts = [_break_branch_symmetry(start, lower, upper)]
    base = starts[0]
    if problem.data_start:
        try:
            guess = initial_table_from_trace(problem.trace, problem.poly, problem.spec, problem.breakpoints,
                                             problem.bounds, problem.initial_soc).matrix()
        except (FitError, ValueError) as exc:
            log.info("data-driven start unavailable: %s", exc)
        else:
            base = np.clip(guess, lower, upper)
            if not np.array_equal(base, start):
                starts.append(base)
    order = evaluator.visit_order()
    # swapping every visited row is an exact relabelling, so stop one short
    for k in range(1, min(problem.label_swaps, order.size - 1) + 1):
        starts.append(_swap_branches(base, order[-k:]))
    rng = np.random.default_rng(problem.seed)
    for _ in range(problem.restarts):
        jitter = np.exp(rng.normal(0.0, 0.5, size=start.shape))
        starts.append(np.clip(start * jitter, lower, upper))

    best = None
    for candidate in starts:
        matrix, iterations, status = _fit_from(problem, evaluator, candidate, lower, upper)
        cost = float(np.sum(evaluator.residuals(matrix)[0] ** 2))
        # later starts must beat the incumbent by more than rounding
        if best is None or cost < best[0] * (1 - 1e-9):
            best = (cost, matrix, iterations, status)
    cost, matrix, iterations, status = best
    if cost > float(np.sum(res0 ** 2)):
        matrix, status = start, 0
    messages = {0: "iteration cap reached", 1: "gradient tolerance met", 2: "cost decrease below ftol",
                3: "parameter step below xtol", 4: "ftol and xtol met"}
    return _summarise(problem, evaluator, matrix, iterations, status > 0, initial_rms,
                      messages.get(status, f"solver status {status}"))


def _swap_branches(matrix, rows):
    """Exchange the (R, C) pairs of branches 1 and 2 on ``rows``."""
    out = matrix.copy()
    out[rows] = out[rows][:, [0, 2, 1, 4, 3]]
    return out


def _break_branch_symmetry(matrix, lower, upper):
    """Nudge rows whose two RC branches are identical.

    Swapping the branches leaves the model unchanged, so a symmetric start
    is a saddle the gradient never leaves.
    """
    out = matrix.copy()
    same = (out[:, 1] == out[:, 2]) & (out[:, 3] == out[:, 4])
    out[same, 3] *= 0.5
    out[same, 4] *= 2.0
    return np.clip(out, lower, upper)


def _fit_from(problem, evaluator, start, lower, upper):
    matrix = start
    iterations = 0
    if problem.strategy == "block":
        for b, rows in _block_windows(problem, evaluator):
            free = np.zeros(matrix.shape, dtype=bool)
            free[b] = True
            matrix, nfev, _ = _solve(evaluator, matrix, free, lower, upper, problem.max_iter, rows)
            iterations += nfev
    free = np.ones(matrix.shape, dtype=bool)
    matrix, nfev, status = _solve(evaluator, matrix, free, lower, upper, problem.max_iter)
    return matrix, iterations + nfev, status


def _block_windows(problem, evaluator):
    """Sample indices of the pulse/rest pairs owned by each breakpoint, high SOC first."""
    seg = segment_pulses(problem.trace)
    soc = coulomb_counted_soc(problem.trace, problem.spec, problem.initial_soc)
    owned = {}
    for start, _, stop in seg.pulses:
        mid = 0.5 * (soc[start] + soc[stop - 1])
        b = int(_nearest_breakpoint(problem.breakpoints, [mid])[0])
        owned.setdefault(b, []).append(np.arange(start, stop))
    order = sorted(owned, key=lambda b: -problem.breakpoints[b])
    return [(b, np.concatenate(owned[b])) for b in order]


def initial_table_from_trace(trace, poly, spec, breakpoints=DEFAULT_BREAKPOINTS, bounds=None,
                             initial_soc=1.0, threshold=None):
    """Data-driven starting table.

    R_s comes from the voltage step at each pulse onset divided by the current
    step. The two RC branches come from a two-exponential peel of each
    relaxation tail measured against the OCV polynomial; the branch with the
    smaller capacitance is labelled branch 1. Breakpoints without data are
    interpolated in log space, or fall back to mid-bounds.
    """
    bounds = bounds or DEFAULT_BOUNDS
    lower = np.array([bounds[n][0] for n in PARAM_NAMES])
    upper = np.array([bounds[n][1] for n in PARAM_NAMES])
    bp = np.asarray(breakpoints, dtype=float)
    fallback = midbounds_table(bp, bounds).matrix()[0]
    seg = segment_pulses(trace, threshold)
    soc = coulomb_counted_soc(trace, spec, initial_soc)
    t, cur, volt = trace.t, trace.current, trace.voltage
    estimates = {b: [] for b in range(bp.size)}
    for on_start, on_end, rest_end in seg.pulses:
        row = np.full(5, np.nan)
        if on_start > 0:
            d_i = cur[on_start] - cur[on_start - 1]
            if d_i != 0:
                row[0] = (volt[on_start - 1] - volt[on_start]) / d_i
        amp = float(np.mean(cur[on_start:on_end]))
        t_on = t[on_end] - t[on_start] if on_end < len(t) else t[on_end - 1] - t[on_start]
        tail = _peel_two_exponentials(t[on_end:rest_end] - t[on_end],
                                      poly(soc[on_end:rest_end]) - volt[on_end:rest_end])
        if tail is not None and amp > 0:
            branches = []
            for a, tau in tail:
                r = a / (amp * -np.expm1(-t_on / tau))
                branches.append((r, tau / r))
            branches.sort(key=lambda rc: rc[1])
            (r1, c1), (r2, c2) = branches
            row[1:] = (r1, r2, c1, c2)
        mid = 0.5 * (soc[on_start] + soc[rest_end - 1])
        estimates[int(_nearest_breakpoint(bp, [mid])[0])].append(row)
    matrix = np.full((bp.size, 5), np.nan)
    for b, rows in estimates.items():
        rows = np.array(rows).reshape(-1, 5)
        for j in range(5):
            finite = rows[np.isfinite(rows[:, j]), j]
            if finite.size:
                matrix[b, j] = np.median(finite)
    matrix = np.clip(matrix, lower, upper)
    for j in range(5):
        col = matrix[:, j]
        ok = np.isfinite(col)
        if ok.sum() == 0:
            col[:] = fallback[j]
        elif ok.sum() < col.size:
            col[~ok] = np.exp(np.interp(bp[~ok], bp[ok], np.log(col[ok])))
    return SocParameterTable.from_matrix(bp, np.clip(matrix, lower, upper))


def _peel_two_exponentials(s, y):
    """Fit ``y ~ a_f exp(-s/tau_f) + a_s exp(-s/tau_s)`` by log-linear peeling."""
    if s.size < 10:
        return None
    late = slice(s.size // 2, None)
    pos = y[late] > 0
    if pos.sum() < 3:
        return None
    slope, icpt = np.polyfit(s[late][pos], np.log(y[late][pos]), 1)
    if not slope < 0:
        return None
    slow = (float(np.exp(icpt)), float(-1.0 / slope))
    early = slice(0, max(3, s.size // 4))
    z = y[early] - slow[0] * np.exp(-s[early] / slow[1])
    pos = z > 0
    if pos.sum() >= 2:
        slope_f, icpt_f = np.polyfit(s[early][pos], np.log(z[pos]), 1)
        if slope_f < 0 and -1.0 / slope_f < slow[1]:
            return (float(np.exp(icpt_f)), float(-1.0 / slope_f)), slow
    # single exponential tail: give the fast branch a small share
    return (0.1 * slow[0], 0.1 * slow[1]), slow


@dataclass(frozen=True)
class ParameterSensitivity:
    breakpoint: float
    name: str
    value: float
    sensitivity: float
    weakly_identified: bool


def identifiability_report(problem, result, floor=1e-5, rel_step=0.01):
    """Voltage sensitivity to a +-1 % change of every fitted parameter.

    The sensitivity is the larger RMS change of the simulated voltage over
    the two perturbations. Parameters below ``floor`` (volts) are flagged as
    weakly identified.
    """
    evaluator = _Evaluator(problem)
    matrix = result.table.matrix()
    base, n_base = evaluator.voltages(matrix)
    report = []
    for b, soc in enumerate(problem.breakpoints):
        for j, name in enumerate(PARAM_NAMES):
            worst = 0.0
            for factor in (1.0 + rel_step, 1.0 - rel_step):
                pert = matrix.copy()
                pert[b, j] *= factor
                volts, n_valid = evaluator.voltages(pert)
                n = min(n_base, n_valid)
                diff = volts[:n] - base[:n]
                if n < base.size:
                    diff = np.concatenate([diff, np.full(base.size - n, SENTINEL)])
                worst = max(worst, float(np.sqrt(np.mean(diff ** 2))))
            report.append(ParameterSensitivity(float(soc), name, float(matrix[b, j]), worst, worst < floor))
    return report
