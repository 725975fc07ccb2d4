"""OCV extraction from relaxation windows and least-squares polynomial fitting."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.linalg import solve_triangular

from .ecm import EcmState, OcvPolynomial, simulate
from .errors import FitError

log = logging.getLogger(__name__)

MIN_REST_SAMPLES = 10
PEAK_TOLERANCE = 1e-3  # V


class OcvPoint(NamedTuple):
    soc: float
    ocv: float
    source_pulse_index: int


@dataclass(frozen=True)
class OcvSampleSet:
    """Extracted ``(SOC, OCV)`` points.

    ``flagged`` lists pulse indices whose final rest sample sits more than
    1 mV below the window maximum. ``residual_polarization`` holds the model
    estimate of ``v1 + v2`` at each point when a parameter table was supplied.
    """

    points: tuple
    excluded: int = 0
    flagged: tuple = ()
    residual_polarization: tuple | None = None

    def __post_init__(self):
        for p in self.points:
            if not 0.0 <= p.soc <= 1.0:
                raise ValueError(f"SOC {p.soc} outside [0, 1]")

    def __len__(self):
        return len(self.points)

    @property
    def soc(self):
        return np.array([p.soc for p in self.points])

    @property
    def ocv(self):
        return np.array([p.ocv for p in self.points])

    @classmethod
    def from_arrays(cls, soc, ocv):
        return cls(tuple(OcvPoint(float(s), float(v), k) for k, (s, v) in enumerate(zip(soc, ocv))))


def coulomb_counted_soc(trace, spec, initial_soc=1.0):
    """SOC at every sample, integrating current held constant between samples."""
    dq = trace.current[:-1] * np.diff(trace.t)
    soc = initial_soc - spec.coulombic_efficiency * np.concatenate([[0.0], np.cumsum(dq)]) / spec.nominal_capacity
    return np.clip(soc, 0.0, 1.0)


def extract_ocv_points(trace, seg, spec, initial_soc=1.0, model=None):
    """Take the last sample of every rest window as an OCV observation.

    Parameters
    ----------
    trace : CurrentVoltageTrace
        Must carry voltage.
    seg : PulseSegmentation
        Segmentation of the same trace.
    spec : CellSpec
    initial_soc : float
        SOC at the first sample.
    model : tuple of (SocParameterTable, OcvPolynomial), optional
        When given, the residual branch polarisation ``v1 + v2`` predicted by
        the model at each extraction time is reported. It is not subtracted.
    """
    if trace.voltage is None:
        raise ValueError("trace has no voltage column")
    if seg.n_samples != len(trace):
        raise ValueError("segmentation was derived from a different trace")
    soc = coulomb_counted_soc(trace, spec, initial_soc)
    points, flagged = [], []
    excluded = 0
    picks = []
    for start, end, pulse_index in seg.rest_windows():
        if end - start < MIN_REST_SAMPLES:
            excluded += 1
            log.warning("rest window [%d, %d) shorter than %d samples", start, end, MIN_REST_SAMPLES)
            continue
        window = trace.voltage[start:end]
        final = float(window[-1])
        if window.max() - final > PEAK_TOLERANCE:
            flagged.append(pulse_index)
        points.append(OcvPoint(float(soc[end - 1]), final, pulse_index))
        picks.append(end - 1)
    residual = None
    if model is not None:
        table, poly = model
        sim = simulate(trace, spec, table, poly, EcmState(initial_soc), dt_max=np.inf,
                       stop_at_cutoff=False)
        pol = sim.v1 + sim.v2
        residual = tuple(float(pol[k]) if k < pol.size else float("nan") for k in picks)
    return OcvSampleSet(tuple(points), excluded, tuple(flagged), residual)


@dataclass(frozen=True)
class FitReport:
    coefficients: tuple
    r_squared: float
    residual_rms: float
    n_points: int
    residuals: np.ndarray = field(repr=False, default=None)

    @property
    def degree(self):
        return len(self.coefficients) - 1

    def polynomial(self):
        """The fit as an :class:`OcvPolynomial` (degrees below 5 are zero-padded)."""
        if self.degree > 5:
            raise ValueError("only fits of degree <= 5 map onto OcvPolynomial")
        return OcvPolynomial((0.0,) * (5 - self.degree) + tuple(self.coefficients))

    def to_dict(self):
        return {
            "coefficients": [float(c) for c in self.coefficients],
            "degree": self.degree,
            "r_squared": float(self.r_squared),
            "residual_rms": float(self.residual_rms),
            "n_points": int(self.n_points),
        }


def fit_polynomial(samples, degree=5):
    """Least-squares polynomial in SOC, solved through a QR factorisation.

    Coefficients are returned highest power first. For data with zero
    variance R^2 is reported as 1 when the residuals vanish and 0 otherwise.
    """
    x = np.asarray(samples.soc, dtype=float)
    y = np.asarray(samples.ocv, dtype=float)
    n = x.size
    if n < degree + 2:
        raise FitError(f"degree-{degree} fit needs at least {degree + 2} points, got {n}")
    vander = np.vander(x, degree + 1)
    q, r = np.linalg.qr(vander)
    diag = np.abs(np.diag(r))
    if diag.min() <= 1e-12 * diag.max() or np.unique(x).size < degree + 1:
        raise FitError("Vandermonde system is rank deficient (duplicate SOC values?)")
    coeffs = solve_triangular(r, q.T @ y, lower=False)
    resid = y - vander @ coeffs
    ss_res = float(resid @ resid)
    centered = y - y.mean()
    ss_tot = float(centered @ centered)
    scale = max(1.0, float(np.abs(y).max()))
    if ss_tot <= (1e-14 * scale) ** 2 * n:
        r2 = 1.0 if ss_res <= (1e-10 * scale) ** 2 * n else 0.0
    else:
        r2 = 1.0 - ss_res / ss_tot
    return FitReport(tuple(coeffs.tolist()), r2, float(np.sqrt(ss_res / n)), n, resid)
