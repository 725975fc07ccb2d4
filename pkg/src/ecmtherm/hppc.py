"""HPPC square-wave current profiles, trace CSV I/O and pulse segmentation."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .ecm import CurrentVoltageTrace
from .errors import ConfigurationError, TraceParseError

log = logging.getLogger(__name__)

PULSE_FIRST = "pulse-first"
REST_FIRST = "rest-first"

DEFAULT_COLUMNS = {"time": "time_s", "current": "current_A", "voltage": "voltage_V"}
MIN_WINDOW_SAMPLES = 3


@dataclass(frozen=True)
class HppcProfileSpec:
    """Constant-amplitude discharge square wave.

    Defaults reproduce a C/2 test of a 3000 mAh cell: 1.5 A, 2.8 mHz, 50 % duty,
    sampled at 0.4 Sa/s for four hours.
    """

    amplitude: float = 1.5
    frequency: float = 2.8e-3
    duty_cycle: float = 0.5
    duration: float = 14400.0
    sample_interval: float = 2.5
    phase: str = PULSE_FIRST

    def __post_init__(self):
        if not self.amplitude > 0:
            raise ConfigurationError("amplitude must be positive")
        if not self.frequency > 0:
            raise ConfigurationError("frequency must be positive")
        if not 0 < self.duty_cycle < 1:
            raise ConfigurationError("duty_cycle must lie in (0, 1)")
        if not self.duration > 0:
            raise ConfigurationError("duration must be positive")
        if not self.sample_interval > 0:
            raise ConfigurationError("sample_interval must be positive")
        if self.phase not in (PULSE_FIRST, REST_FIRST):
            raise ConfigurationError(f"phase must be {PULSE_FIRST!r} or {REST_FIRST!r}")

    @property
    def period(self):
        return 1.0 / self.frequency

    @property
    def pulse_width(self):
        return self.duty_cycle * self.period

    @property
    def n_periods(self):
        return self.duration * self.frequency

    @property
    def n_pulses(self):
        """Pulses that start inside ``[0, duration)``."""
        offset = 0.0 if self.phase == PULSE_FIRST else (1.0 - self.duty_cycle)
        return max(0, math.ceil(self.n_periods - offset - 1e-12))

    def _on(self, cycles):
        frac = cycles - np.floor(cycles)
        if self.phase == PULSE_FIRST:
            return frac < self.duty_cycle
        return frac >= 1.0 - self.duty_cycle

    def current_at(self, t):
        t = np.asarray(t, dtype=float)
        return np.where(self._on(t * self.frequency), self.amplitude, 0.0)

    def sample_times(self):
        n = math.ceil(self.duration / self.sample_interval - 1e-9)
        return np.arange(n) * self.sample_interval

    def edge_times(self):
        """Switching instants inside ``(0, duration)``."""
        k = np.arange(math.ceil(self.n_periods) + 1)
        if self.phase == PULSE_FIRST:
            starts, stops = k * self.period, (k + self.duty_cycle) * self.period
        else:
            starts, stops = (k + 1 - self.duty_cycle) * self.period, (k + 1) * self.period
        edges = np.sort(np.concatenate([starts, stops]))
        return edges[(edges > 0) & (edges < self.duration)]


def generate_profile(spec):
    """Sample ``spec`` into a current-only trace."""
    if spec.sample_interval >= 0.5 * spec.period:
        raise ConfigurationError(
            f"sample_interval {spec.sample_interval} s aliases a {spec.period:.6g} s period"
        )
    t = spec.sample_times()
    return CurrentVoltageTrace(t, spec.current_at(t))


def write_trace(trace, stream, header_lines=(), extra_columns=None):
    """Write ``trace`` as CSV with a ``time_s,current_A[,voltage_V]`` header.

    Floats are written with ``repr`` so a reload is bit-exact.
    """
    for line in header_lines:
        stream.write(f"# {line}\n")
    columns = [("time_s", trace.t), ("current_A", trace.current)]
    if trace.voltage is not None:
        columns.append(("voltage_V", trace.voltage))
    for name, values in (extra_columns or {}).items():
        columns.append((name, np.asarray(values)))
    stream.write(",".join(name for name, _ in columns) + "\n")
    data = [np.asarray(values, dtype=float).tolist() for _, values in columns]
    for row in zip(*data):
        stream.write(",".join(repr(v) for v in row) + "\n")


def load_trace(source, column_map=None, discharge_negative=False):
    """Parse a CSV trace.

    Parameters
    ----------
    source : path or iterable of str
        File path or text stream. Blank lines and lines starting with ``#`` are ignored;
        the first remaining line is the header.
    column_map : dict, optional
        Maps ``time``/``current``/``voltage`` to header names. Missing keys
        fall back to ``time_s``, ``current_A`` and ``voltage_V``. The voltage
        column may be absent, in which case the trace has no voltage.
    discharge_negative : bool
        Set when the source logs discharge current as negative; the sign is
        flipped so that discharge is positive.
    """
    if isinstance(source, (str, os.PathLike)):
        with open(source, encoding="utf-8") as fh:
            return load_trace(fh, column_map, discharge_negative)
    names = dict(DEFAULT_COLUMNS)
    names.update(column_map or {})
    header = None
    idx = {}
    times, currents, volts = [], [], []
    prev_t = None
    for lineno, raw in enumerate(source, start=1):
        text = raw.strip()
        if not text or text.startswith("#"):
            continue
        row = next(csv.reader([text]))
        if header is None:
            header = [h.strip() for h in row]
            for key in ("time", "current"):
                if names[key] not in header:
                    raise TraceParseError(f"missing column {names[key]!r}", lineno)
                idx[key] = header.index(names[key])
            if names["voltage"] in header:
                idx["voltage"] = header.index(names["voltage"])
            elif column_map and "voltage" in column_map:
                raise TraceParseError(f"missing column {names['voltage']!r}", lineno)
            continue
        if len(row) != len(header):
            raise TraceParseError(f"expected {len(header)} fields, got {len(row)}", lineno)
        try:
            values = {key: float(row[col]) for key, col in idx.items()}
        except ValueError:
            raise TraceParseError("non-numeric cell", lineno) from None
        if not all(math.isfinite(v) for v in values.values()):
            raise TraceParseError("non-finite value", lineno)
        t = values["time"]
        if prev_t is not None and t <= prev_t:
            kind = "duplicate timestamp" if t == prev_t else "timestamp out of order"
            raise TraceParseError(f"{kind} {t!r}", lineno)
        prev_t = t
        times.append(t)
        currents.append(values["current"])
        if "voltage" in idx:
            volts.append(values["voltage"])
    if header is None:
        raise TraceParseError("no header row")
    if not times:
        raise TraceParseError("no data rows")
    current = np.array(currents)
    if discharge_negative:
        current = -current
    return CurrentVoltageTrace(np.array(times), current, np.array(volts) if "voltage" in idx else None)


@dataclass(frozen=True)
class PulseSegmentation:
    """Pulse and rest windows as half-open sample index ranges.

    Each pulse is ``(on_start, on_end, rest_end)``: the pulse occupies
    ``[on_start, on_end)`` and its following rest ``[on_end, rest_end)``.
    ``leading_rest_end`` marks the rest before the first pulse.
    """

    pulses: tuple
    threshold_used: float
    n_samples: int
    leading_rest_end: int
    warnings: int = 0
    notes: tuple = field(default_factory=tuple)

    def __len__(self):
        return len(self.pulses)

    def rest_windows(self):
        """``(start, end, pulse_index)`` for every rest window; -1 tags the leading rest."""
        windows = []
        if self.leading_rest_end > 0:
            windows.append((0, self.leading_rest_end, -1))
        windows.extend((on_end, rest_end, k) for k, (_, on_end, rest_end) in enumerate(self.pulses))
        return windows


def _runs(mask):
    padded = np.concatenate([[False], mask, [False]])
    change = np.flatnonzero(np.diff(padded.astype(np.int8)))
    return list(zip(change[::2].tolist(), change[1::2].tolist()))


def segment_pulses(trace, threshold=None):
    """Split ``trace`` into pulse/rest pairs by thresholding ``|I|``.

    ``threshold`` defaults to half the peak ``|I|``. Pulse or rest windows
    shorter than three samples are dropped and counted in ``warnings``; a
    dropped pulse is treated as rest.
    """
    mag = np.abs(trace.current)
    n = len(trace)
    peak = float(mag.max())
    if peak == 0.0:
        return PulseSegmentation((), 0.0 if threshold is None else float(threshold), n, n)
    if threshold is None:
        threshold = 0.5 * peak
    if not 0 < threshold < peak:
        raise ValueError(f"threshold must lie strictly between 0 and {peak}")
    active = mag > threshold
    warnings = 0
    notes = []
    runs = []
    for start, stop in _runs(active):
        if stop - start < MIN_WINDOW_SAMPLES:
            warnings += 1
            notes.append(f"pulse at samples [{start}, {stop}) shorter than {MIN_WINDOW_SAMPLES} samples")
            continue
        runs.append((start, stop))
    pulses = []
    for k, (start, stop) in enumerate(runs):
        rest_end = runs[k + 1][0] if k + 1 < len(runs) else n
        rest = mag[stop:rest_end]
        if rest_end - stop < MIN_WINDOW_SAMPLES or rest.mean() >= threshold:
            warnings += 1
            notes.append(f"rest after sample {stop} too short or not at rest")
            continue
        pulses.append((start, stop, rest_end))
    for note in notes:
        log.warning(note)
    leading = runs[0][0] if runs else n
    return PulseSegmentation(tuple(pulses), float(threshold), n, leading, warnings, tuple(notes))
