"""Axisymmetric electro-thermal model of a cylindrical cell.

Cell-centred finite volumes on a structured ``(r, z)`` grid. Two electrode
potentials obey ``div(sigma_+ grad phi_+) = -j`` and ``div(sigma_- grad phi_-)
= j`` with Dirichlet references on the positive (top) and negative (bottom)
tab faces. The temperature obeys

    d(rho c_p T)/dt - div(k grad T) = sigma_+|grad phi_+|^2 + sigma_-|grad phi_-|^2 + q_ech

and is advanced with backward Euler. The volumetric current ``j = I Q /
(Q_ref Vol)`` and heat ``q_ech = j (V_ocv - V - T dU/dT)`` come from the
equivalent-circuit simulation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .ecm import EcmState, simulate
from .errors import ConfigurationError, SetupError, SolverError

ACTIVE, POSITIVE_TAB, NEGATIVE_TAB = 0, 1, 2
ZONE_NAMES = {ACTIVE: "active", POSITIVE_TAB: "positive_tab", NEGATIVE_TAB: "negative_tab"}
FACES = ("outer", "top", "bottom")
RESIDUAL_TOL = 1e-10


@dataclass(frozen=True)
class ThermalProps:
    """Material properties. Defaults are order-of-magnitude estimates for an AA cell."""

    density: float = 1800.0
    specific_heat: float = 1100.0
    conductivity_radial: float = 3.0
    conductivity_axial: float = 30.0
    sigma_plus: float = 3.8e7
    sigma_minus: float = 6.0e7
    entropic_coeff: float = 0.0

    def __post_init__(self):
        for name in ("density", "specific_heat", "conductivity_radial", "conductivity_axial",
                     "sigma_plus", "sigma_minus"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")


@dataclass(frozen=True)
class ThermalBoundary:
    """Convective exterior faces; ``faces`` may mark any of them ``"insulated"``."""

    h_conv: float = 10.0
    t_ambient: float = 295.15
    faces: dict = field(default_factory=lambda: {f: "convective" for f in FACES})

    def __post_init__(self):
        if not self.h_conv >= 0:
            raise ConfigurationError("h_conv must be non-negative")
        for name, kind in self.faces.items():
            if name not in FACES or kind not in ("convective", "insulated"):
                raise ConfigurationError(f"bad boundary entry {name}={kind}")

    def h(self, face):
        return self.h_conv if self.faces.get(face, "convective") == "convective" else 0.0


@dataclass(frozen=True, eq=False)
class CylMesh:
    """Uniform axisymmetric grid; arrays are shaped ``(n_z, n_r)``.

    The top ``tab_layers`` rows of cells are the positive tab, the bottom
    ``tab_layers`` rows the negative tab, and the rest is active.
    """

    n_r: int = 20
    n_z: int = 60
    radius: float = 7.25e-3
    height: float = 50.5e-3
    tab_layers: int = 1

    def __post_init__(self):
        if self.n_r < 1 or self.n_z < 2:
            raise ConfigurationError("mesh needs n_r >= 1 and n_z >= 2")
        if not (self.radius > 0 and self.height > 0):
            raise ConfigurationError("mesh dimensions must be positive")
        if self.tab_layers < 0 or self.n_z - 2 * self.tab_layers < 1:
            raise ConfigurationError("tab layers leave no active cells")
        r_f = np.linspace(0.0, self.radius, self.n_r + 1)
        z_f = np.linspace(0.0, self.height, self.n_z + 1)
        annulus = math.pi * (r_f[1:] ** 2 - r_f[:-1] ** 2)
        zones = np.full((self.n_z, self.n_r), ACTIVE, dtype=np.int8)
        if self.tab_layers:
            zones[-self.tab_layers:] = POSITIVE_TAB
            zones[: self.tab_layers] = NEGATIVE_TAB
        for name, value in (("r_faces", r_f), ("z_faces", z_f), ("annulus", annulus), ("zones", zones),
                            ("volumes", np.outer(np.diff(z_f), annulus))):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @classmethod
    def for_cell(cls, spec, n_r=20, n_z=60, tab_layers=1):
        return cls(n_r, n_z, spec.radius, spec.height, tab_layers)

    @property
    def dr(self):
        return self.radius / self.n_r

    @property
    def dz(self):
        return self.height / self.n_z

    @property
    def shape(self):
        return (self.n_z, self.n_r)

    @property
    def r_centers(self):
        return 0.5 * (self.r_faces[1:] + self.r_faces[:-1])

    @property
    def z_centers(self):
        return 0.5 * (self.z_faces[1:] + self.z_faces[:-1])

    @property
    def total_volume(self):
        return math.pi * self.radius ** 2 * self.height

    def zone_volume(self, zone):
        return float(self.volumes[self.zones == zone].sum())

    def face_areas(self):
        """Exterior face areas per boundary cell: outer ``(n_z,)``, top/bottom ``(n_r,)``."""
        outer = np.full(self.n_z, 2 * math.pi * self.radius * self.dz)
        return {"outer": outer, "top": self.annulus.copy(), "bottom": self.annulus.copy()}

    def exterior_area(self):
        return 2 * math.pi * self.radius * self.height + 2 * math.pi * self.radius ** 2


@dataclass(frozen=True, eq=False)
class ThermalField:
    T: np.ndarray
    phi_plus: np.ndarray
    phi_minus: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        arrays = [np.asarray(a, dtype=float) for a in (self.T, self.phi_plus, self.phi_minus)]
        if any(a.shape != arrays[0].shape for a in arrays):
            raise ValueError("field arrays must share one shape")
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise ValueError("field values must be finite")
        if np.any(arrays[0] <= 0):
            raise ValueError("temperature must be positive kelvin")
        for name, a in zip(("T", "phi_plus", "phi_minus"), arrays):
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @classmethod
    def uniform(cls, mesh, temperature, t=0.0):
        zeros = np.zeros(mesh.shape)
        return cls(np.full(mesh.shape, float(temperature)), zeros, zeros, t)

    def volume_average(self, mesh):
        return float(np.sum(self.T * mesh.volumes) / mesh.volumes.sum())


def cell_properties(mesh, props, zone_props=None):
    """Per-cell property arrays; ``zone_props`` maps zone names to overrides."""
    names = ("density", "specific_heat", "conductivity_radial", "conductivity_axial",
             "sigma_plus", "sigma_minus", "entropic_coeff")
    out = {n: np.full(mesh.shape, float(getattr(props, n))) for n in names}
    for zone, zname in ZONE_NAMES.items():
        override = (zone_props or {}).get(zname)
        if override is None:
            continue
        mask = mesh.zones == zone
        for n in names:
            out[n][mask] = getattr(override, n)
    return out


def _index(mesh):
    return np.arange(mesh.n_z * mesh.n_r).reshape(mesh.shape)


def diffusion_operator(mesh, k_r, k_z):
    """Sparse ``L`` with ``(L x)_P`` = net conductive flow into cell P (interior faces only)."""
    idx = _index(mesh)
    rows, cols, vals = [], [], []
    if mesh.n_r > 1:
        area = 2 * math.pi * mesh.r_faces[1:-1] * mesh.dz  # (n_r - 1,)
        g = area[None, :] / (0.5 * mesh.dr / k_r[:, :-1] + 0.5 * mesh.dr / k_r[:, 1:])
        a, b = idx[:, :-1].ravel(), idx[:, 1:].ravel()
        g = g.ravel()
        rows += [a, b, a, b]
        cols += [b, a, a, b]
        vals += [g, g, -g, -g]
    area = mesh.annulus[None, :]
    g = area / (0.5 * mesh.dz / k_z[:-1] + 0.5 * mesh.dz / k_z[1:])
    a, b = idx[:-1].ravel(), idx[1:].ravel()
    g = g.ravel()
    rows += [a, b, a, b]
    cols += [b, a, a, b]
    vals += [g, g, -g, -g]
    n = idx.size
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))


def _robin_terms(mesh, k_r, k_z, boundary):
    """Diagonal conductances to ambient for every exterior face (convective resistance + half cell)."""
    g = np.zeros(mesh.shape)
    areas = mesh.face_areas()
    h = boundary.h("outer")
    if h > 0:
        g[:, -1] += areas["outer"] / (1.0 / h + 0.5 * mesh.dr / k_r[:, -1])
    for face, row in (("top", -1), ("bottom", 0)):
        h = boundary.h(face)
        if h > 0:
            g[row, :] += areas[face] / (1.0 / h + 0.5 * mesh.dz / k_z[row, :])
    return g


def _dirichlet_terms(mesh, sigma, dirichlet):
    """Second-order one-sided Dirichlet closure on the top/bottom faces.

    Returns (rows, cols, vals) to add to the operator and the right-hand-side
    contribution. The flux through a face at value ``phi_b`` next to cells
    ``phi_1`` (adjacent) and ``phi_2`` (next inward) is
    ``sigma A (8 phi_b - 9 phi_1 + phi_2) / (3 dz)``, exact for quadratics.
    """
    idx = _index(mesh)
    rows, cols, vals = [], [], []
    rhs = np.zeros(mesh.shape)
    for face, (value, mask) in dirichlet.items():
        if face not in ("top", "bottom"):
            raise SetupError(f"Dirichlet references are supported on top/bottom faces, not {face}")
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), (mesh.n_r,))
        row1, row2 = (-1, -2) if face == "top" else (0, 1)
        coef = sigma[row1, :] * mesh.annulus / (3.0 * mesh.dz)
        cells = np.flatnonzero(mask)
        rows += [idx[row1, cells], idx[row1, cells]]
        cols += [idx[row1, cells], idx[row2, cells]]
        vals += [-9.0 * coef[cells], coef[cells]]
        rhs[row1, cells] += 8.0 * coef[cells] * value
    return rows, cols, vals, rhs


def _check_residual(matrix, x, rhs):
    rel = _backward_error(matrix, x, rhs)
    r = matrix @ x - rhs
    if rel >= RESIDUAL_TOL and np.linalg.norm(r) > 0:
        raise SolverError(f"linear solve residual {rel:.3e} above {RESIDUAL_TOL}")
    return rel


class PoissonSolver:
    """Factorised ``div(sigma grad phi) = -source`` with Dirichlet faces.

    ``dirichlet`` maps ``"top"``/``"bottom"`` to ``(value, radial_mask)``;
    values may be replaced per solve.
    """

    def __init__(self, mesh, sigma, dirichlet):
        if not dirichlet or not any(np.any(m) for _, m in dirichlet.values()):
            raise SetupError("potential problem has no reference (Dirichlet) face; system is singular")
        sigma = np.broadcast_to(np.asarray(sigma, dtype=float), mesh.shape)
        if np.any(sigma <= 0):
            raise SetupError("conductivity must be positive")
        self.mesh = mesh
        self.sigma = sigma
        self.masks = {face: mask for face, (_, mask) in dirichlet.items()}
        op = diffusion_operator(mesh, sigma, sigma)
        rows, cols, vals, _ = _dirichlet_terms(mesh, sigma, {f: (0.0, m) for f, m in self.masks.items()})
        extra = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                              shape=op.shape)
        self.matrix = (op + extra).tocsc()
        self._lu = splu(self.matrix)
        self.default_values = {face: value for face, (value, _) in dirichlet.items()}

    def solve(self, source, values=None):
        values = dict(self.default_values, **(values or {}))
        # solve for the offset from one reference value; constants lie in the null space of the interior operator
        shift = float(next(iter(values.values())))
        _, _, _, bc = _dirichlet_terms(self.mesh, self.sigma,
                                       {f: (values[f] - shift, m) for f, m in self.masks.items()})
        rhs = (-np.asarray(source, dtype=float) * self.mesh.volumes - bc).ravel()
        x = self._lu.solve(rhs)
        if _residual_too_large(self.matrix, x, rhs):
            x = x + self._lu.solve(rhs - self.matrix @ x)
        _check_residual(self.matrix, x, rhs)
        return x.reshape(self.mesh.shape) + shift

    def boundary_flux(self, phi, values=None):
        """Current leaving through each Dirichlet face, A (-sigma grad phi . n_out integrated)."""
        values = dict(self.default_values, **(values or {}))
        out = {}
        for face, mask in self.masks.items():
            row1, row2 = (-1, -2) if face == "top" else (0, 1)
            coef = self.sigma[row1] * self.mesh.annulus / (3.0 * self.mesh.dz)
            flux_in = coef * (8.0 * values[face] - 9.0 * phi[row1] + phi[row2])
            out[face] = float(-np.sum(np.where(mask, flux_in, 0.0)))
        return out


def _backward_error(matrix, x, rhs):
    """Normwise relative backward error ``|Ax - b| / (|A||x| + |b|)``."""
    r = matrix @ x - rhs
    scale = float(np.linalg.norm(abs(matrix) @ np.abs(x) + np.abs(rhs)))
    return float(np.linalg.norm(r)) / max(scale, 1e-300)


def _residual_too_large(matrix, x, rhs):
    return _backward_error(matrix, x, rhs) >= 0.1 * RESIDUAL_TOL


def solve_poisson(mesh, sigma, source, dirichlet):
    """One-shot ``div(sigma grad phi) = -source``; see :class:`PoissonSolver`."""
    return PoissonSolver(mesh, sigma, dirichlet).solve(source)


def tab_references(mesh, terminal_voltage=0.0):
    """Dirichlet specs for the two potentials: phi_+ = V on the top face, phi_- = 0 on the bottom."""
    if mesh.tab_layers == 0:
        raise SetupError("mesh has no tab zones to carry potential references")
    pos = mesh.zones[-1] == POSITIVE_TAB
    neg = mesh.zones[0] == NEGATIVE_TAB
    return {"top": (terminal_voltage, pos)}, {"bottom": (0.0, neg)}


def volumetric_current(current, capacity, capacity_ref, volume):
    """Volumetric current transfer rate ``I Q / (Q_ref Vol)``, A/m^3."""
    if not (volume > 0 and capacity_ref > 0):
        raise ValueError("volume and reference capacity must be positive")
    return current * capacity / (capacity_ref * volume)


def electrochem_heat(j, v_ocv, v, temperature, entropic_coeff):
    """Electrochemical heat ``j (V_ocv - V - T dU/dT)``, W/m^3."""
    return j * (v_ocv - v - temperature * entropic_coeff)


def solve_potentials(mesh, props, j_field, terminal_voltage=0.0, zone_props=None):
    """Electrode potentials for a volumetric current field.

    Returns ``(phi_plus, phi_minus)`` with phi_+ referenced to
    ``terminal_voltage`` on the positive tab face and phi_- to zero on the
    negative tab face.
    """
    cp = cell_properties(mesh, props, zone_props)
    pos, neg = tab_references(mesh, terminal_voltage)
    phi_p = PoissonSolver(mesh, cp["sigma_plus"], pos).solve(j_field)
    phi_m = PoissonSolver(mesh, cp["sigma_minus"], neg).solve(-np.asarray(j_field))
    return phi_p, phi_m


def _face_gradients(mesh, phi, dirichlet=None):
    """Cell-centred ``(d phi/dr, d phi/dz)`` from averaged face gradients."""
    nz, nr = mesh.shape
    gr_faces = np.zeros((nz, nr + 1))
    if nr > 1:
        gr_faces[:, 1:-1] = np.diff(phi, axis=1) / mesh.dr
    gz_faces = np.zeros((nz + 1, nr))
    gz_faces[1:-1] = np.diff(phi, axis=0) / mesh.dz
    for face, (value, mask) in (dirichlet or {}).items():
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), (nr,))
        if face == "top":
            g = (8.0 * value - 9.0 * phi[-1] + phi[-2]) / (3.0 * mesh.dz)
            gz_faces[-1] = np.where(mask, -g, 0.0)
        else:
            g = (-8.0 * value + 9.0 * phi[0] - phi[1]) / (3.0 * mesh.dz)
            gz_faces[0] = np.where(mask, g, 0.0)
    return 0.5 * (gr_faces[:, 1:] + gr_faces[:, :-1]), 0.5 * (gz_faces[1:] + gz_faces[:-1])


def joule_heat(mesh, props, phi_plus, phi_minus, terminal_voltage=0.0, zone_props=None):
    """``sigma_+|grad phi_+|^2 + sigma_-|grad phi_-|^2`` per cell, W/m^3."""
    cp = cell_properties(mesh, props, zone_props)
    if mesh.tab_layers:
        pos, neg = tab_references(mesh, terminal_voltage)
    else:
        pos = neg = None
    gr_p, gz_p = _face_gradients(mesh, phi_plus, pos)
    gr_m, gz_m = _face_gradients(mesh, phi_minus, neg)
    return cp["sigma_plus"] * (gr_p ** 2 + gz_p ** 2) + cp["sigma_minus"] * (gr_m ** 2 + gz_m ** 2)


class HeatSolver:
    """Backward-Euler heat conduction with Robin exterior faces.

    Factorisations are cached per time step size.
    """

    def __init__(self, mesh, props, boundary, zone_props=None):
        cp = cell_properties(mesh, props, zone_props)
        self.mesh = mesh
        self.boundary = boundary
        self.capacity = (cp["density"] * cp["specific_heat"] * mesh.volumes).ravel()
        self.operator = diffusion_operator(mesh, cp["conductivity_radial"], cp["conductivity_axial"])
        self.robin = _robin_terms(mesh, cp["conductivity_radial"], cp["conductivity_axial"], boundary).ravel()
        self._factors = {}

    def _system(self, dt):
        key = float(dt)
        if key not in self._factors:
            a = (sp.diags(self.capacity / dt + self.robin) - self.operator).tocsc()
            self._factors[key] = (a, splu(a))
        return self._factors[key]

    def step(self, temperature, source, dt):
        """Return ``(T_new, heat_in_through_boundary)``; heat in watts."""
        if not dt > 0:
            raise ValueError("dt must be positive")
        a, lu = self._system(dt)
        t_old = np.asarray(temperature, dtype=float).ravel()
        # solve for the offset from the mean; keeps large-dt, weakly cooled systems accurate
        shift = float(np.sum(self.capacity * t_old) / np.sum(self.capacity))
        rhs = self.capacity / dt * (t_old - shift) + np.asarray(source, dtype=float).ravel() \
            * self.mesh.volumes.ravel() + self.robin * (self.boundary.t_ambient - shift)
        x = lu.solve(rhs)
        if _residual_too_large(a, x, rhs):
            x = x + lu.solve(rhs - a @ x)
        _check_residual(a, x, rhs)
        t_new = x + shift
        boundary_in = float(np.sum(self.robin * (self.boundary.t_ambient - t_new)))
        return t_new.reshape(self.mesh.shape), boundary_in


def step_temperature(field, mesh, props, boundary, sources, dt, zone_props=None, include_joule=True):
    """One implicit step of the heat equation.

    ``sources`` is the electrochemical heat per cell (W/m^3); Joule heating
    from the field's current potentials is added unless ``include_joule`` is
    False.
    """
    total = np.asarray(sources, dtype=float) * np.ones(mesh.shape)
    if include_joule and (np.any(field.phi_plus) or np.any(field.phi_minus)):
        v_ref = float(field.phi_plus[-1].mean()) if mesh.tab_layers else 0.0
        total = total + joule_heat(mesh, props, field.phi_plus, field.phi_minus, v_ref, zone_props)
    t_new, _ = HeatSolver(mesh, props, boundary, zone_props).step(field.T, total, dt)
    return ThermalField(t_new, field.phi_plus, field.phi_minus, field.t + dt)


@dataclass(frozen=True, eq=False)
class CosimResult:
    times: np.ndarray
    t_avg: np.ndarray
    t_max: np.ndarray
    t_min: np.ndarray
    final: ThermalField
    snapshots: tuple
    ecm: object
    heat: np.ndarray  # electrochemical heat released per thermal step, J
    boundary_heat: np.ndarray  # heat entering through the exterior per step, J

    @property
    def temperature_rise(self):
        return float(self.t_avg[-1] - self.t_avg[0])

    @property
    def spatial_spread(self):
        return float(self.t_max[-1] - self.t_min[-1])


def _check_geometry(spec, mesh):
    if not (math.isclose(spec.radius, mesh.radius, rel_tol=1e-9)
            and math.isclose(spec.height, mesh.height, rel_tol=1e-9)):
        raise ConfigurationError("mesh geometry does not match the cell dimensions")


def _binned_history(history, step_bounds):
    """Per thermal step: charge (C), dissipated energy (J) and the last sub-step index."""
    starts = history.bounds[:-1]
    owner = np.clip(np.searchsorted(step_bounds, starts, side="right") - 1, 0, step_bounds.size - 2)
    n = step_bounds.size - 1
    charge = np.bincount(owner, weights=history.charge(), minlength=n)
    energy = np.bincount(owner, weights=history.dissipated_energy(), minlength=n)
    return charge, energy


def cosimulate(spec, table, poly, profile, mesh=None, props=None, boundary=None, dt_thermal=10.0,
               initial=None, dt_ecm=1.0, zone_props=None, capacity_ref=None, snapshot_every=None):
    """Couple the circuit model to the field solver.

    Each thermal step takes the circuit's charge and dissipated energy over
    the step, forms the volumetric current and electrochemical heat over the
    active zone, re-solves both potentials (quasi-static) and advances the
    temperature implicitly. The run ends where the circuit simulation ends.

    Returns
    -------
    CosimResult
        Volume-averaged, max and min temperature at every thermal step
        boundary (including t=0), the final field and optional snapshots
        every ``snapshot_every`` steps.
    """
    mesh = mesh or CylMesh.for_cell(spec)
    props = props or ThermalProps()
    boundary = boundary or ThermalBoundary()
    _check_geometry(spec, mesh)
    if not dt_thermal > 0:
        raise ValueError("dt_thermal must be positive")
    capacity_ref = spec.nominal_capacity if capacity_ref is None else capacity_ref
    initial = initial or EcmState(1.0)

    from .ecm import _profile_knots

    samples = _profile_knots(profile)[0]
    t0, t_last = float(samples[0]), float(samples[-1])
    grid = t0 + dt_thermal * np.arange(int(math.floor((t_last - t0) / dt_thermal + 1e-9)) + 1)
    ecm = simulate(profile, spec, table, poly, initial, dt_ecm, extra_times=grid)
    t_end = ecm.t_end
    step_bounds = grid[grid < t_end - 1e-9 * max(1.0, abs(t_end))]
    step_bounds = np.append(step_bounds, t_end) if step_bounds.size else np.array([t0, t_end])
    if step_bounds.size < 2 or step_bounds[-1] <= step_bounds[0]:
        raise ValueError("profile too short for one thermal step")
    charge, energy = _binned_history(ecm.history, step_bounds)

    cp = cell_properties(mesh, props, zone_props)
    active = mesh.zones == ACTIVE
    v_active = mesh.zone_volume(ACTIVE)
    pos, neg = tab_references(mesh)
    solver_p = PoissonSolver(mesh, cp["sigma_plus"], pos)
    solver_m = PoissonSolver(mesh, cp["sigma_minus"], neg)
    heat_solver = HeatSolver(mesh, props, boundary, zone_props)

    hist = ecm.history
    soc_at = np.interp(step_bounds, hist.bounds, hist.soc)
    v_rc = np.interp(step_bounds, hist.bounds, hist.v1 + hist.v2)
    field_now = ThermalField.uniform(mesh, boundary.t_ambient, t0)
    temps = field_now.T
    times = [t0]
    t_avg = [field_now.volume_average(mesh)]
    t_max = [float(temps.max())]
    t_min = [float(temps.min())]
    snapshots = []
    boundary_heat = np.zeros(step_bounds.size - 1)
    for n in range(step_bounds.size - 1):
        dt = step_bounds[n + 1] - step_bounds[n]
        mean_current = charge[n] / dt
        j = volumetric_current(mean_current, spec.nominal_capacity, capacity_ref, v_active)
        v_ocv = float(poly(soc_at[n]))
        if charge[n] != 0:
            overpotential = energy[n] / charge[n]
            v_term = v_ocv - overpotential
        else:
            v_term = float(poly(soc_at[n + 1])) - v_rc[n + 1]
        q = np.where(active, electrochem_heat(j, v_ocv, v_term, temps, cp["entropic_coeff"]), 0.0)
        j_field = np.where(active, j, 0.0)
        phi_p = solver_p.solve(j_field, {"top": v_term})
        phi_m = solver_m.solve(-j_field)
        joule = joule_heat(mesh, props, phi_p, phi_m, v_term, zone_props)
        temps, boundary_heat[n] = heat_solver.step(temps, q + joule, dt)
        field_now = ThermalField(temps, phi_p, phi_m, float(step_bounds[n + 1]))
        times.append(field_now.t)
        t_avg.append(field_now.volume_average(mesh))
        t_max.append(float(temps.max()))
        t_min.append(float(temps.min()))
        if snapshot_every and (n + 1) % snapshot_every == 0:
            snapshots.append(field_now)
    boundary_heat *= np.diff(step_bounds)
    return CosimResult(np.array(times), np.array(t_avg), np.array(t_max), np.array(t_min), field_now,
                       tuple(snapshots), ecm, energy, boundary_heat)


@dataclass(frozen=True, eq=False)
class LumpedResult:
    t: np.ndarray
    T: np.ndarray

    def at(self, times):
        return np.interp(times, self.t, self.T)


def lumped_temperature_from_power(times, power, mass, specific_heat, h_a, t_ambient, t_initial=None):
    """Exact lumped response to piecewise-constant ``power`` on ``[times[k], times[k+1])``."""
    if not (mass > 0 and specific_heat > 0):
        raise ValueError("mass and specific heat must be positive")
    times = np.asarray(times, dtype=float)
    power = np.asarray(power, dtype=float)
    heat_cap = mass * specific_heat
    temp = t_ambient if t_initial is None else t_initial
    out = [temp]
    for dt, p in zip(np.diff(times).tolist(), power.tolist()):
        if h_a > 0:
            target = t_ambient + p / h_a
            temp = target + (temp - target) * math.exp(-h_a * dt / heat_cap)
        else:
            temp = temp + p * dt / heat_cap
        out.append(temp)
    return LumpedResult(times, np.array(out))


def lumped_temperature(spec, table, poly, profile, mass, specific_heat, h_a, t_ambient,
                       initial=None, dt_ecm=1.0, t_initial=None):
    """Single-node energy balance ``m c_p dT/dt = I (V_ocv - V) - hA (T - T_amb)``."""
    ecm = simulate(profile, spec, table, poly, initial or EcmState(1.0), dt_ecm)
    hist = ecm.history
    power = hist.dissipated_energy() / hist.dt
    return lumped_temperature_from_power(hist.bounds, power, mass, specific_heat, h_a, t_ambient, t_initial)


# --- export --------------------------------------------------------------------


def write_field_csv(field_, mesh, stream, header_lines=()):
    for line in header_lines:
        stream.write(f"# {line}\n")
    stream.write("r_m,z_m,T_K,phi_plus_V,phi_minus_V\n")
    rr, zz = np.meshgrid(mesh.r_centers, mesh.z_centers)
    for row in zip(rr.ravel().tolist(), zz.ravel().tolist(), field_.T.ravel().tolist(),
                   field_.phi_plus.ravel().tolist(), field_.phi_minus.ravel().tolist()):
        stream.write(",".join(repr(v) for v in row) + "\n")


def write_field_vtk(field_, mesh, stream, title="ecmtherm field"):
    """Legacy ASCII VTK rectilinear grid: x = r, y = z, one cell layer in the third axis."""
    title = title.replace("\n", " ")[:255]
    stream.write("# vtk DataFile Version 3.0\n")
    stream.write(f"{title}\nASCII\nDATASET RECTILINEAR_GRID\n")
    stream.write(f"DIMENSIONS {mesh.n_r + 1} {mesh.n_z + 1} 1\n")
    stream.write(f"X_COORDINATES {mesh.n_r + 1} double\n")
    stream.write(" ".join(repr(float(v)) for v in mesh.r_faces) + "\n")
    stream.write(f"Y_COORDINATES {mesh.n_z + 1} double\n")
    stream.write(" ".join(repr(float(v)) for v in mesh.z_faces) + "\n")
    stream.write("Z_COORDINATES 1 double\n0.0\n")
    stream.write(f"CELL_DATA {mesh.n_r * mesh.n_z}\n")
    for name, values in (("temperature_K", field_.T), ("phi_plus_V", field_.phi_plus),
                         ("phi_minus_V", field_.phi_minus), ("zone", mesh.zones.astype(float))):
        stream.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
        stream.write("\n".join(repr(float(v)) for v in values.ravel()) + "\n")


def write_temperature_csv(result, stream, header_lines=()):
    for line in header_lines:
        stream.write(f"# {line}\n")
    stream.write("time_s,T_avg_K,T_max_K,T_min_K\n")
    for row in zip(result.times.tolist(), result.t_avg.tolist(), result.t_max.tolist(), result.t_min.tolist()):
        stream.write(",".join(repr(v) for v in row) + "\n")
