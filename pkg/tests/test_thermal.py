import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ecmtherm.ecm import CellSpec, CurrentVoltageTrace, EcmState
from ecmtherm.errors import ConfigurationError, SetupError
from ecmtherm.thermal import (ACTIVE, FACES, NEGATIVE_TAB, POSITIVE_TAB, CylMesh, HeatSolver, PoissonSolver,
                              ThermalBoundary, ThermalField, ThermalProps, cosimulate, electrochem_heat,
                              lumped_temperature, lumped_temperature_from_power, solve_poisson,
                              solve_potentials, step_temperature, volumetric_current, write_field_csv,
                              write_field_vtk, write_temperature_csv)

PROPS = ThermalProps()
INSULATED = ThermalBoundary(faces={f: "insulated" for f in FACES})


@pytest.fixture(scope="module")
def mesh(cell):
    return CylMesh.for_cell(cell)


@pytest.fixture(scope="module")
def full_run(cell, table, poly, hppc_spec):
    return cosimulate(cell, table, poly, hppc_spec)


# --- types -----------------------------------------------------------------------


@pytest.mark.parametrize("field", ["density", "specific_heat", "conductivity_radial", "sigma_plus", "sigma_minus"])
def test_props_must_be_positive(field):
    with pytest.raises(ConfigurationError):
        ThermalProps(**{field: 0.0})


def test_boundary_validation():
    with pytest.raises(ConfigurationError):
        ThermalBoundary(h_conv=-1.0)
    with pytest.raises(ConfigurationError):
        ThermalBoundary(faces={"side": "insulated"})


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 30), st.integers(3, 70), st.floats(1e-3, 0.1), st.floats(1e-3, 0.2))
def test_mesh_volume_and_zones(n_r, n_z, radius, height):
    m = CylMesh(n_r, n_z, radius, height, 1)
    assert m.volumes.sum() == pytest.approx(math.pi * radius ** 2 * height, rel=1e-12)
    assert set(np.unique(m.zones)) <= {ACTIVE, POSITIVE_TAB, NEGATIVE_TAB}
    counts = [np.count_nonzero(m.zones == z) for z in (ACTIVE, POSITIVE_TAB, NEGATIVE_TAB)]
    assert sum(counts) == n_r * n_z
    assert counts[1] == counts[2] == n_r


def test_mesh_rejects_no_active_cells():
    with pytest.raises(ConfigurationError):
        CylMesh(2, 2, 0.01, 0.05, 1)


def test_field_invariants(mesh):
    with pytest.raises(ValueError):
        ThermalField.uniform(mesh, 0.0)
    bad = np.zeros(mesh.shape)
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        ThermalField(np.full(mesh.shape, 300.0), bad, np.zeros(mesh.shape))


# --- source terms ----------------------------------------------------------------------


def test_volumetric_current(cell):
    assert volumetric_current(2.0, 10.0, 10.0, 4.0) == 0.5
    assert volumetric_current(1.5, 10800.0, 10800.0, cell.volume) == pytest.approx(1.799e5, rel=1e-3)
    assert volumetric_current(0.0, 1.0, 1.0, 1.0) == 0.0
    with pytest.raises(ValueError):
        volumetric_current(1.0, 1.0, 1.0, 0.0)
    with pytest.raises(ValueError):
        volumetric_current(1.0, 1.0, 0.0, 1.0)


def test_electrochem_heat():
    assert electrochem_heat(1.8e5, 1.5, 1.35, 300.0, 0.0) == pytest.approx(2.7e4, rel=1e-12)
    assert electrochem_heat(1.8e5, 1.5, 1.5, 300.0, 0.0) == 0.0
    assert electrochem_heat(1.8e5, 1.5, 1.5, 300.0, -1e-4) > 0


# --- potentials --------------------------------------------------------------------------


def test_laplace_with_constant_reference(mesh):
    phi_p, phi_m = solve_potentials(mesh, PROPS, np.zeros(mesh.shape), terminal_voltage=1.4)
    assert np.allclose(phi_p, 1.4, rtol=0, atol=1e-12)
    assert np.allclose(phi_m, 0.0, rtol=0, atol=1e-12)


@pytest.mark.parametrize("n_z", [10, 40, 200])
def test_axial_column_matches_quadratic(n_z):
    m = CylMesh(1, n_z, 0.01, 0.05, 0)
    j, sigma, length = 1.0e5, 3.8e7, m.height
    phi = solve_poisson(m, sigma, np.full(m.shape, j), {"bottom": (0.0, [True])})
    z = m.z_centers
    exact = -j * z * (z - 2 * length) / (2 * sigma)
    assert np.max(np.abs(phi[:, 0] - exact)) < 1e-8


def test_doubling_sigma_halves_potential(mesh):
    j = np.where(mesh.zones == ACTIVE, 1.8e5, 0.0)
    ref = {"top": (1.2, np.ones(mesh.n_r, bool))}
    a = solve_poisson(mesh, 3.8e7, j, ref)
    b = solve_poisson(mesh, 7.6e7, j, ref)
    assert np.allclose(b - 1.2, (a - 1.2) / 2, rtol=1e-9, atol=1e-14)


def test_missing_reference_is_setup_error(mesh):
    with pytest.raises(SetupError):
        PoissonSolver(mesh, 1.0, {})
    with pytest.raises(SetupError):
        PoissonSolver(mesh, 1.0, {"top": (0.0, np.zeros(mesh.n_r, bool))})
    with pytest.raises(SetupError):
        solve_potentials(CylMesh(2, 5, 0.01, 0.05, 0), PROPS, np.zeros((5, 2)))


def test_charge_balance_and_tab_current(mesh, cell):
    active = mesh.zones == ACTIVE
    j_val = volumetric_current(1.5, cell.nominal_capacity, cell.nominal_capacity, mesh.zone_volume(ACTIVE))
    j = np.where(active, j_val, 0.0)
    assert np.sum(j * mesh.volumes) == pytest.approx(1.5, rel=1e-10)
    solver = PoissonSolver(mesh, PROPS.sigma_plus, {"top": (1.3, np.ones(mesh.n_r, bool))})
    phi = solver.solve(j)
    assert solver.boundary_flux(phi)["top"] == pytest.approx(1.5, rel=1e-9)


# --- temperature -----------------------------------------------------------------------------


def test_equilibrium_is_unchanged(mesh):
    field = ThermalField.uniform(mesh, 300.0)
    for dt in (0.1, 10.0, 1e5):
        out = step_temperature(field, mesh, PROPS, INSULATED, np.zeros(mesh.shape), dt)
        assert np.allclose(out.T, 300.0, rtol=0, atol=1e-10)
        assert out.t == dt


@pytest.mark.parametrize("q, dt", [(1e4, 5.0), (3.3e3, 0.25), (5e5, 100.0)])
def test_uniform_source_insulated(mesh, q, dt):
    field = ThermalField.uniform(mesh, 295.0)
    out = step_temperature(field, mesh, PROPS, INSULATED, np.full(mesh.shape, q), dt)
    gain = q * dt / (PROPS.density * PROPS.specific_heat)
    assert np.allclose(out.T - 295.0, gain, rtol=1e-8, atol=0)


def test_lumped_cooling_oracle(cell, mesh):
    boundary = ThermalBoundary(h_conv=10.0, t_ambient=295.0)
    biot = 10.0 * cell.radius / 2 / PROPS.conductivity_radial
    assert biot < 0.1
    solver = HeatSolver(mesh, PROPS, boundary)
    tau = PROPS.density * PROPS.specific_heat * mesh.total_volume / (10.0 * mesh.exterior_area())
    temps = np.full(mesh.shape, 305.0)
    avg = [305.0]
    for _ in range(200):
        temps, _ = solver.step(temps, np.zeros(mesh.shape), 10.0)
        avg.append(float(np.sum(temps * mesh.volumes) / mesh.volumes.sum()))
    avg = np.array(avg)
    assert np.all(np.diff(avg) < 0) and np.all(avg > 295.0)
    t = np.arange(avg.size) * 10.0
    lumped = 295.0 + 10.0 * np.exp(-t / tau)
    assert np.max(np.abs(avg - lumped)) <= 0.05 * 10.0


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.1, 1000.0))
def test_energy_conservation_per_step(seed, dt):
    m = CylMesh(6, 12, 7.25e-3, 50.5e-3, 1)
    rng = np.random.default_rng(seed)
    boundary = ThermalBoundary(h_conv=25.0, t_ambient=290.0, faces={"outer": "convective", "top": "convective",
                                                                   "bottom": "insulated"})
    solver = HeatSolver(m, PROPS, boundary)
    t_old = 290.0 + 20.0 * rng.random(m.shape)
    source = 1e5 * rng.random(m.shape)
    t_new, boundary_in = solver.step(t_old, source, dt)
    stored = float(np.sum(PROPS.density * PROPS.specific_heat * m.volumes * (t_new - t_old)))
    supplied = dt * (float(np.sum(source * m.volumes)) + boundary_in)
    assert stored == pytest.approx(supplied, rel=1e-8)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(250.0, 350.0))
def test_maximum_principle(seed, t_amb):
    m = CylMesh(5, 10, 7.25e-3, 50.5e-3, 1)
    t0 = 280.0 + 40.0 * np.random.default_rng(seed).random(m.shape)
    solver = HeatSolver(m, PROPS, ThermalBoundary(h_conv=50.0, t_ambient=t_amb))
    lo, hi = min(t0.min(), t_amb), max(t0.max(), t_amb)
    temps = t0
    for _ in range(20):
        temps, _ = solver.step(temps, np.zeros(m.shape), 30.0)
        assert temps.min() >= lo - 1e-9 and temps.max() <= hi + 1e-9


def test_mirror_symmetry(mesh):
    m = CylMesh(8, 20, 7.25e-3, 50.5e-3, 0)
    solver = HeatSolver(m, PROPS, ThermalBoundary())
    temps = np.full(m.shape, 300.0)
    for _ in range(5):
        temps, _ = solver.step(temps, np.full(m.shape, 2e4), 10.0)
    assert np.allclose(temps, temps[::-1], rtol=0, atol=1e-10)


# --- co-simulation -------------------------------------------------------------------------------


def test_zero_current_keeps_ambient(cell, table, poly):
    t = np.arange(0.0, 600.0, 2.5)
    run = cosimulate(cell, table, poly, CurrentVoltageTrace(t, np.zeros_like(t)), mesh=CylMesh.for_cell(cell, 6, 20))
    assert np.max(np.abs(run.t_max - 295.15)) < 1e-9
    assert np.max(np.abs(run.t_min - 295.15)) < 1e-9


def test_geometry_mismatch(cell, table, poly):
    t = np.arange(0.0, 10.0, 2.5)
    with pytest.raises(ConfigurationError):
        cosimulate(cell, table, poly, CurrentVoltageTrace(t, np.zeros_like(t)), mesh=CylMesh(4, 10, 0.01, 0.05))


def test_full_discharge_band(full_run):
    assert full_run.ecm.termination == "soc_depleted"
    assert 3.0 <= full_run.temperature_rise <= 12.0
    assert full_run.spatial_spread < 0.5


def test_cosim_energy_bookkeeping(cell, full_run):
    m = CylMesh.for_cell(cell)
    stored = float(np.sum(PROPS.density * PROPS.specific_heat * m.volumes * (full_run.final.T - 295.15)))
    generated = float(full_run.heat.sum())
    assert stored == pytest.approx(generated + float(full_run.boundary_heat.sum()), rel=1e-3)


def test_lumped_matches_field(cell, table, poly, hppc_spec, full_run, mesh):
    lumped = lumped_temperature(cell, table, poly, hppc_spec, PROPS.density * mesh.total_volume,
                                PROPS.specific_heat, 10.0 * mesh.exterior_area(), 295.15)
    rise = full_run.temperature_rise
    assert abs((lumped.T[-1] - 295.15) - rise) <= 0.05 * rise


@pytest.mark.slow
def test_mesh_refinement(cell, table, poly, hppc_spec, full_run):
    fine = cosimulate(cell, table, poly, hppc_spec, mesh=CylMesh.for_cell(cell, 40, 120))
    assert abs(fine.t_avg[-1] - full_run.t_avg[-1]) < 0.01 * full_run.temperature_rise


def test_lumped_adiabatic_and_steady():
    out = lumped_temperature_from_power([0.0, 100.0], [5.0], 0.015, 1100.0, 0.0, 295.0)
    assert out.T[-1] == pytest.approx(295.0 + 5.0 * 100.0 / (0.015 * 1100.0), rel=1e-15)
    steady = lumped_temperature_from_power([0.0, 1e7], [2.0], 0.015, 1100.0, 0.05, 295.0)
    assert steady.T[-1] == pytest.approx(295.0 + 2.0 / 0.05, rel=1e-12)
    with pytest.raises(ValueError):
        lumped_temperature_from_power([0.0, 1.0], [1.0], 0.0, 1100.0, 0.0, 295.0)


# --- export ---------------------------------------------------------------------------------------


def test_exports(full_run, mesh):
    buf = io.StringIO()
    write_field_csv(full_run.final, mesh, buf, ["h"])
    lines = buf.getvalue().splitlines()
    assert lines[1] == "r_m,z_m,T_K,phi_plus_V,phi_minus_V"
    assert len(lines) == 2 + mesh.n_r * mesh.n_z
    vtk = io.StringIO()
    write_field_vtk(full_run.final, mesh, vtk, "title")
    text = vtk.getvalue()
    assert text.startswith("# vtk DataFile Version 3.0\ntitle\nASCII\nDATASET RECTILINEAR_GRID\n")
    assert f"DIMENSIONS {mesh.n_r + 1} {mesh.n_z + 1} 1" in text
    assert text.count("LOOKUP_TABLE default") == 4
    trace = io.StringIO()
    write_temperature_csv(full_run, trace)
    assert trace.getvalue().splitlines()[0] == "time_s,T_avg_K,T_max_K,T_min_K"
    assert len(trace.getvalue().splitlines()) == 1 + full_run.times.size
