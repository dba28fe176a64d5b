import numpy as np
import pytest
from numpy.polynomial.legendre import leggauss

from app.errors import InvalidInputError
from app.schemas.config import EnergySpec, InitialSpec, NewtonConfig
from app.services.analysis import (
    barenblatt,
    cell_average,
    convergence_rate,
    convergence_study,
    dissipation_series,
    dissipation_sum,
    error_norms,
    fp_exact,
    fp_exact_energy,
    fp_limit_energy,
    fp_reference_series,
    lower_bound_series,
    sample_at_centers,
)
from app.services.energy import (
    FokkerPlanckEnergy,
    PorousMediumEnergy,
    confining_potential,
    fp_equilibrium,
    linear_potential,
    species_mass,
)
from app.services.euler_fv import run_euler_flow
from app.services.ljko_solver import LjkoState, Trajectory, ljko_step, run_flow
from app.services.mesh import build_cartesian, build_triangulation, refine_midpoint, staggered_triangulation
from app.services.scenarios import initial_density

FIXED = NewtonConfig(adaptive=False)


def make_trajectory(times, densities):
    times = np.asarray(times, dtype=float)
    n = len(times)
    states = tuple(LjkoState(rho=r, phi=np.zeros_like(r), tau_used=0.0, newton_iters=0, residual_linf=0.0)
                   for r in densities)
    return Trajectory(
        times=times,
        taus=np.concatenate([[0.0], np.diff(times)]),
        energies=np.zeros(n),
        masses=np.zeros((n, 1)),
        newton_iters=np.zeros(n, dtype=int),
        dissipation=np.zeros(n),
        states=states,
    )


@pytest.mark.parametrize("g", [0.5, 1.0, 2.0])
def test_fp_exact_solves_the_equation(g):
    x = np.linspace(0.05, 0.95, 19)
    t, dx, dt = 0.1, 1e-4, 1e-6
    rho_t = (fp_exact(x, 0, t + dt, g) - fp_exact(x, 0, t - dt, g)) / (2 * dt)
    rho_x = (fp_exact(x + dx, 0, t, g) - fp_exact(x - dx, 0, t, g)) / (2 * dx)
    rho_xx = (fp_exact(x + dx, 0, t, g) - 2 * fp_exact(x, 0, t, g) + fp_exact(x - dx, 0, t, g)) / dx ** 2
    np.testing.assert_allclose(rho_t, rho_xx - g * rho_x, atol=1e-4)


@pytest.mark.parametrize("t", [0.02, 0.05, 0.3])
def test_fp_exact_has_no_flux_walls_and_fixed_mass(t):
    g, dx = 1.0, 1e-6
    for wall in (0.0, 1.0):
        slope = (fp_exact(wall + dx, 0, t, g) - fp_exact(wall - dx, 0, t, g)) / (2 * dx)
        assert slope - g * fp_exact(wall, 0, t, g) == pytest.approx(0.0, abs=1e-6)
    nodes, weights = leggauss(60)
    mass = 0.5 * weights @ fp_exact(0.5 * (nodes + 1), 0, t, g)
    assert mass == pytest.approx(np.pi * (np.exp(0.5) - np.exp(-0.5)), rel=1e-12)
    assert fp_exact(np.linspace(0, 1, 101), 0, t, g).min() > 0


def test_fp_exact_ignores_y():
    np.testing.assert_array_equal(fp_exact(0.3, np.array([0.0, 0.5, 1.0]), 0.1), fp_exact(0.3, 0.0, 0.1))


def test_error_norms_vanish_on_exact_samples(grid4):
    times = [0.05, 0.1, 0.15]
    trajectory = make_trajectory(times, [sample_at_centers(grid4, fp_exact, t) for t in times])
    assert error_norms(trajectory, fp_exact, grid4) == (0.0, 0.0)


def test_error_norms_single_cell_offset(grid4):
    times = [0.0, 0.1, 0.2]
    delta = 0.3
    densities = [sample_at_centers(grid4, fp_exact, t) for t in times]
    densities[1] = densities[1].copy()
    densities[2] = densities[2].copy()
    densities[1][5] += delta
    densities[2][5] -= delta
    err_linf, err_l1 = error_norms(make_trajectory(times, densities), fp_exact, grid4)
    assert err_linf == pytest.approx(delta / 16)
    assert err_l1 == pytest.approx(0.2 * delta / 16)


def test_error_norms_scale_with_the_discrepancy(grid4, rng):
    times = [0.05, 0.1, 0.2]
    exact = [sample_at_centers(grid4, fp_exact, t) for t in times]
    noise = [np.zeros(16)] + [rng.normal(size=16) for _ in times[1:]]
    base = error_norms(make_trajectory(times, [e + n for e, n in zip(exact, noise)]), fp_exact, grid4)
    scaled = error_norms(make_trajectory(times, [e + 3 * n for e, n in zip(exact, noise)]), fp_exact, grid4)
    np.testing.assert_allclose(scaled, 3 * np.asarray(base), rtol=1e-12)


def test_convergence_rate_edges():
    assert convergence_rate(None, 0.1) is None
    assert convergence_rate(0.2, 0.1) == pytest.approx(1.0)
    assert convergence_rate(0.1, 0.0) is None


def test_study_without_refinement_has_zero_rate(triangles24):
    rows = convergence_study(triangles24, 2, 0.05, 0.05, 0.15, refine=False)
    assert len(rows) == 2
    assert rows[0].rate_linf is None and rows[0].rate_l1 is None
    assert rows[1].rate_linf == pytest.approx(0.0, abs=1e-12)
    assert rows[1].rate_l1 == pytest.approx(0.0, abs=1e-12)
    assert rows[0].h == rows[1].h and rows[0].dt == rows[1].dt


def test_study_refines_and_halves_tau(triangles24):
    rows = convergence_study(triangles24, 2, 0.05, 0.05, 0.15, scheme="euler")
    assert rows[1].dt == pytest.approx(0.025)
    assert rows[1].h == pytest.approx(rows[0].h / 2)
    assert rows[1].err_l1 < rows[0].err_l1


def test_study_in_parallel_matches_serial(triangles24):
    serial = convergence_study(triangles24, 2, 0.05, 0.05, 0.15, jobs=1)
    parallel = convergence_study(triangles24, 2, 0.05, 0.05, 0.15, jobs=2)
    for a, b in zip(serial, parallel):
        assert a.err_linf == pytest.approx(b.err_linf, rel=1e-12)
        assert a.err_l1 == pytest.approx(b.err_l1, rel=1e-12)


def test_study_rejects_bad_requests(triangles24, grid4):
    with pytest.raises(InvalidInputError):
        convergence_study(triangles24, 1, 0.05, 0.05, 0.15)
    with pytest.raises(InvalidInputError):
        convergence_study(triangles24, 2, 0.05, 0.05, 0.15, scheme="heun")
    with pytest.raises(InvalidInputError):
        convergence_study(grid4, 2, 0.05, 0.05, 0.15)


@pytest.mark.slow
@pytest.mark.parametrize("scheme", ["ljko", "euler"])
def test_first_order_rates(scheme):
    rows = convergence_study(staggered_triangulation(3, 4), 4, 0.05, 0.05, 0.25, scheme=scheme)
    for row in rows[-2:]:
        assert 0.85 <= row.rate_linf <= 1.15
        assert 0.85 <= row.rate_l1 <= 1.15


def test_dissipation_series_vanishes_at_equilibrium(grid4):
    potential = linear_potential(1.0)
    energy = FokkerPlanckEnergy(grid4, potential)
    rho = fp_equilibrium(grid4, potential, 2.0)
    trajectory = run_flow(grid4, energy, rho, 0.3, FIXED, tau=0.1)
    frame = dissipation_series(trajectory, energy, energy.value(rho))
    assert list(frame.columns) == ["t", "dissipation"]
    np.testing.assert_allclose(frame["dissipation"], 0.0, atol=1e-12)
    np.testing.assert_allclose(frame["t"], [0.0, 0.1, 0.2, 0.3])


def test_barenblatt_values():
    assert barenblatt(0.5, 0.5, 2.0) == pytest.approx(0.25)
    assert barenblatt(0.5, 0.5, 4.0) == pytest.approx((3 / 8) ** (1 / 3))
    assert barenblatt(2.0, 0.5, 2.0) == 0.0
    with pytest.raises(InvalidInputError):
        barenblatt(0.5, 0.5, 1.0)


@pytest.mark.parametrize("m", [2.0, 4.0])
def test_sampled_barenblatt_is_a_discrete_steady_state(m, grid4):
    energy = PorousMediumEnergy(grid4, m, confining_potential())
    x, y = grid4.cell_centers.T
    rho = barenblatt(x, y, m)
    assert np.ptp(energy.gradient(rho) / grid4.cell_measures) < 1e-12
    result = ljko_step(grid4, energy, rho, 0.1, FIXED)
    assert np.sum(np.abs(result.rho - rho) * grid4.cell_measures) < 1e-10


@pytest.mark.parametrize("g", [0.0, 1.0, 2.5])
def test_limit_energy_closed_form(g):
    if g == 0:
        assert fp_limit_energy(g) == pytest.approx(np.pi * np.log(np.pi) - np.pi)
    else:
        assert fp_limit_energy(g) == pytest.approx(fp_exact_energy(1e3, g), rel=1e-12)


def test_exact_energy_decreases():
    energies = [fp_exact_energy(t) for t in np.linspace(0.0, 1.0, 21)]
    assert (np.diff(energies) < 0).all()
    frame = fp_reference_series([0.05, 0.5, 5.0])
    assert (frame["dissipation"].iloc[:2] > 0).all()
    assert abs(frame["dissipation"].iloc[-1]) < 1e-12


def test_cell_average_exact_for_linear_functions(grid4, triangles24):
    for mesh in (grid4, triangles24):
        np.testing.assert_allclose(cell_average(mesh, lambda x, y: np.full_like(x, 3.0)), 3.0)
        centroids = np.asarray(mesh.cell_vertices).mean(axis=1)
        np.testing.assert_allclose(cell_average(mesh, lambda x, y: 2 * x - y), 2 * centroids[:, 0] - centroids[:, 1])


def test_cell_average_of_quadratic_on_grid(grid4):
    values = cell_average(grid4, lambda x, y: x ** 2)
    assert grid4.cell_measures @ values == pytest.approx(1.0 / 3.0)


def test_lower_bound_never_decreases(triangles24):
    potential = linear_potential(1.0)
    energy = FokkerPlanckEnergy(triangles24, potential)
    rho0 = np.maximum(sample_at_centers(triangles24, fp_exact, 0.05), 0.1)
    trajectory = run_flow(triangles24, energy, rho0, 1.0, FIXED, tau=0.01)
    bounds = lower_bound_series(trajectory, energy.V)
    assert len(bounds) == 101
    assert (np.diff(bounds) >= -1e-9).all()


def test_dissipation_sum_bounded_by_energy_drop(grid4, rng):
    energy = FokkerPlanckEnergy(grid4, linear_potential(1.0))
    trajectory = run_flow(grid4, energy, rng.uniform(0.2, 2.0, 16), 0.5, FIXED, tau=0.02)
    total = dissipation_sum(trajectory, grid4)
    assert 0 < total <= 2 * (trajectory.energies[0] - trajectory.energies[-1]) + 1e-9
    assert total == pytest.approx(2 * trajectory.dissipation.sum(), rel=1e-12)


def fp_setup(tau):
    nodes, triangles = refine_midpoint(*staggered_triangulation(3, 4))
    mesh = build_triangulation(nodes, triangles)
    potential = linear_potential(1.0)
    energy = FokkerPlanckEnergy(mesh, potential)
    rho0 = sample_at_centers(mesh, fp_exact, 0.05)
    reference = energy.value(fp_equilibrium(mesh, potential, species_mass(mesh, rho0)[0]))
    series = {}
    for name, run in (("ljko", run_flow), ("euler", run_euler_flow)):
        trajectory = run(mesh, energy, rho0, 0.25, FIXED, tau=tau, t0=0.05)
        series[name] = dissipation_series(trajectory, energy, reference)["dissipation"].to_numpy()
    return series


@pytest.mark.slow
def test_ljko_dissipates_faster_than_euler():
    series = fp_setup(0.01)
    assert (series["ljko"] <= series["euler"] + 1e-12).all()


@pytest.mark.slow
def test_dissipation_curves_coincide_for_small_tau():
    series = fp_setup(1e-4)
    np.testing.assert_allclose(series["ljko"], series["euler"], rtol=0.01)


@pytest.mark.slow
def test_porous_blob_spreads_towards_barenblatt():
    mesh = build_cartesian(16, 16)
    energy = PorousMediumEnergy(mesh, 4.0, confining_potential())
    x, y = mesh.cell_centers.T
    profile = barenblatt(x, y, 4.0)
    mass = float(mesh.cell_measures @ profile)
    spec = InitialSpec(kind="blob", center=(0.5, 0.5), radius=0.25, mass=mass)
    rho0 = initial_density(mesh, spec, EnergySpec(kind="porous_medium", m=4))

    def support(rho):
        return int((rho > 1e-6 * rho.max()).sum())

    rho = rho0
    for n in range(5):
        state = ljko_step(mesh, energy, rho, 1e-4, step=n + 1)
        assert support(state.rho) > support(rho)
        rho = state.rho

    trajectory = run_flow(mesh, energy, rho0, 1.0, tau=1e-4)
    distances = [
        np.sum(np.abs(state.rho - profile) * mesh.cell_measures)
        for state, t in zip(trajectory.states, trajectory.times)
        if t >= 0.01
    ]
    assert (np.diff(distances) <= 1e-9).all()
