import numpy as np
import pytest
from scipy.optimize import minimize

from app.errors import InvalidInputError
from app.services.dissipation import (
    continuity_residual,
    divergence,
    face_fluxes,
    hj_residual,
    kantorovich_potential,
    psi,
    psi_star,
    solve_hj,
    transport_matrix,
    upwind_densities,
    upwind_value,
    weighted_laplacian,
)
from app.services.mesh import build_cartesian


def test_upwind_follows_potential(two_cells):
    rho = np.array([3.0, 5.0])
    assert upwind_value(two_cells, rho, np.array([2.0, 1.0]), 0) == 3.0
    assert upwind_value(two_cells, rho, np.array([1.0, 2.0]), 0) == 5.0


def test_upwind_tie_is_mean_with_zero_flux(two_cells):
    rho, phi = np.array([3.0, 5.0]), np.array([1.5, 1.5])
    assert upwind_value(two_cells, rho, phi, 0) == 4.0
    assert face_fluxes(two_cells, rho, phi)[0] == 0.0


def test_upwind_rejects_boundary_face(two_cells):
    with pytest.raises(InvalidInputError):
        upwind_value(two_cells, np.ones(2), np.zeros(2), 1)


def test_psi_star_examples(two_cells):
    rho = np.array([1.0, 2.0])
    assert psi_star(two_cells, rho, np.array([1.0, 0.0])) == pytest.approx(1.0)
    assert psi_star(two_cells, rho, np.array([0.0, 1.0])) == pytest.approx(2.0)
    assert psi_star(two_cells, rho, np.array([0.7, 0.7])) == 0.0


def test_psi_star_shift_invariant_and_convex(grid4, rng):
    rho = rng.uniform(0.1, 2.0, grid4.n_cells)
    for _ in range(50):
        phi1, phi2 = rng.normal(size=(2, grid4.n_cells))
        lam = rng.uniform()
        value1, value2 = psi_star(grid4, rho, phi1), psi_star(grid4, rho, phi2)
        assert value1 >= 0
        assert psi_star(grid4, rho, phi1 + 3.7) == pytest.approx(value1, rel=1e-12)
        mixed = psi_star(grid4, rho, lam * phi1 + (1 - lam) * phi2)
        assert mixed <= lam * value1 + (1 - lam) * value2 + 1e-9


def test_multi_species_fields_keep_their_axis(grid4, rng):
    rho = rng.uniform(0.1, 2.0, (grid4.n_cells, 2))
    phi = rng.normal(size=(grid4.n_cells, 2))
    fluxes = face_fluxes(grid4, rho, phi)
    assert fluxes.shape == (grid4.n_faces, 2)
    np.testing.assert_allclose(fluxes[:, 1], face_fluxes(grid4, rho[:, 1], phi[:, 1]))
    assert psi_star(grid4, rho, phi) == pytest.approx(
        psi_star(grid4, rho[:, 0], phi[:, 0]) + psi_star(grid4, rho[:, 1], phi[:, 1])
    )


def test_kantorovich_zero_source(two_cells):
    np.testing.assert_array_equal(kantorovich_potential(two_cells, np.ones(2), np.zeros(2)), np.zeros(2))
    assert psi(two_cells, np.ones(2), np.zeros(2)) == 0.0


def test_kantorovich_two_cells(two_cells):
    rho, h = np.ones(2), np.array([0.4, -0.4])
    phi = kantorovich_potential(two_cells, rho, h)
    assert phi[0] - phi[1] == pytest.approx(0.1, rel=1e-10)
    assert two_cells.cell_measures @ phi == pytest.approx(0.0, abs=1e-14)
    assert psi(two_cells, rho, h) == pytest.approx(0.01, rel=1e-10)
    assert psi_star(two_cells, rho, phi) == pytest.approx(0.01, rel=1e-10)


def test_kantorovich_rejects_bad_inputs(two_cells):
    with pytest.raises(InvalidInputError):
        kantorovich_potential(two_cells, np.ones(2), np.array([0.4, -0.3]))
    with pytest.raises(InvalidInputError):
        kantorovich_potential(two_cells, np.array([1.0, 0.0]), np.array([0.4, -0.4]))


def zero_mean(mesh, values):
    return values - (mesh.cell_measures @ values) / mesh.cell_measures.sum()


def test_kantorovich_balances_fluxes(grid4, rng):
    rho = rng.uniform(0.2, 2.0, grid4.n_cells)
    h = zero_mean(grid4, rng.normal(size=grid4.n_cells))
    phi = kantorovich_potential(grid4, rho, h)
    np.testing.assert_allclose(divergence(grid4, face_fluxes(grid4, rho, phi)), h * grid4.cell_measures, atol=1e-10)
    assert psi(grid4, rho, h) == pytest.approx(psi_star(grid4, rho, phi), rel=1e-10)


def test_fenchel_young_sampling(grid4, rng):
    rho = rng.uniform(0.2, 2.0, grid4.n_cells)
    h = zero_mean(grid4, rng.normal(size=grid4.n_cells))
    value = psi(grid4, rho, h)
    for _ in range(100):
        trial = rng.normal(scale=2.0, size=grid4.n_cells)
        assert value >= np.sum(h * trial * grid4.cell_measures) - psi_star(grid4, rho, trial) - 1e-10


@pytest.mark.parametrize("nx", [2, 3])
def test_legendre_supremum_is_attained(nx, rng):
    mesh = build_cartesian(nx, 1)
    rho = rng.uniform(0.5, 2.0, nx)
    h = zero_mean(mesh, rng.normal(size=nx))
    source = h * mesh.cell_measures

    def negated(phi):
        return psi_star(mesh, rho, phi) - source @ phi

    def gradient(phi):
        return divergence(mesh, face_fluxes(mesh, rho, phi)) - source

    result = minimize(negated, np.zeros(nx), jac=gradient, method="BFGS", options={"gtol": 1e-12})
    assert -result.fun == pytest.approx(psi(mesh, rho, h), abs=1e-8)


def test_psi_is_convex_along_segments(rng):
    mesh = build_cartesian(3, 1)
    m = mesh.cell_measures

    def with_mass(values, mass):
        return values * mass / (m @ values)

    for _ in range(20):
        mu = rng.uniform(0.5, 2.0, 3)
        mass = m @ mu
        rho1 = with_mass(rng.uniform(0.5, 2.0, 3), mass)
        rho2 = with_mass(rng.uniform(0.5, 2.0, 3), mass)
        lam = rng.uniform()
        mixed = lam * rho1 + (1 - lam) * rho2
        lhs = psi(mesh, mixed, mu - mixed)
        rhs = lam * psi(mesh, rho1, mu - rho1) + (1 - lam) * psi(mesh, rho2, mu - rho2)
        assert lhs <= rhs + 1e-9


def test_hj_residual_examples(two_cells):
    phi = np.array([1.0, 0.0])
    np.testing.assert_allclose(hj_residual(two_cells, phi, np.zeros(2), 1.0), [3.0, 0.0])
    np.testing.assert_allclose(hj_residual(two_cells, phi, np.array([0.5, 0.5]), 0.0), [0.5, -0.5])
    np.testing.assert_allclose(hj_residual(two_cells, np.full(2, 2.5), np.full(2, 2.5), 3.0), 0.0)
    with pytest.raises(InvalidInputError):
        hj_residual(two_cells, phi, phi, -1.0)


def test_solve_hj_fixed_points(grid4, rng):
    np.testing.assert_array_equal(solve_hj(grid4, np.full(16, 0.3), 0.5), np.full(16, 0.3))
    f = rng.normal(size=16)
    np.testing.assert_array_equal(solve_hj(grid4, f, 0.0), f)


def test_solve_hj_maximum_principle_and_monotonicity(rng):
    mesh = build_cartesian(8, 8)
    for _ in range(100):
        f = rng.uniform(0.0, 1.0, mesh.n_cells)
        f_low = f - rng.uniform(0.0, 0.5, mesh.n_cells)
        phi = solve_hj(mesh, f, 0.05)
        phi_low = solve_hj(mesh, f_low, 0.05)
        assert np.abs(hj_residual(mesh, phi, f, 0.05)).max() < 1e-10
        assert f.min() - 1e-10 <= phi.min() and phi.max() <= f.max() + 1e-10
        assert f_low.min() - 1e-10 <= phi_low.min() and phi_low.max() <= f_low.max() + 1e-10
        assert (phi - phi_low >= -1e-10).all()


def test_continuity_residual_examples(two_cells, rng):
    rho_prev, rho, phi = np.ones(2), np.array([0.9, 1.1]), np.array([1.0, 0.0])
    np.testing.assert_allclose(continuity_residual(two_cells, rho, rho_prev, phi, 0.1), [0.13, -0.13])
    np.testing.assert_allclose(continuity_residual(two_cells, rho_prev, rho_prev, np.full(2, 4.0), 0.1), 0.0)

    mesh = build_cartesian(3, 3)
    rho, rho_prev, phi = rng.uniform(0.1, 2, 9), rng.uniform(0.1, 2, 9), rng.normal(size=9)
    residual = continuity_residual(mesh, rho, rho_prev, phi, 0.3)
    assert residual.sum() == pytest.approx(mesh.cell_measures @ (rho - rho_prev), abs=1e-13)

    rho *= (mesh.cell_measures @ rho_prev) / (mesh.cell_measures @ rho)
    assert continuity_residual(mesh, rho, rho_prev, phi, 0.3).sum() == pytest.approx(0.0, abs=1e-13)


def test_weighted_laplacian_and_transport(grid4, rng):
    phi = rng.normal(size=grid4.n_cells)
    weights = rng.uniform(0.1, 1.0, grid4.n_faces)
    laplacian = weighted_laplacian(grid4, weights).toarray()
    np.testing.assert_allclose(laplacian, laplacian.T)
    np.testing.assert_allclose(laplacian.sum(axis=1), 0.0, atol=1e-14)

    transport = transport_matrix(grid4, phi, 0.2).toarray()
    np.testing.assert_allclose(transport.sum(axis=0), 0.0, atol=1e-14)
    off = transport - np.diag(np.diag(transport))
    assert (off <= 0).all()

    rho = rng.uniform(0.1, 2.0, grid4.n_cells)
    np.testing.assert_allclose(transport @ rho, 0.2 * divergence(grid4, face_fluxes(grid4, rho, phi)), atol=1e-13)
    assert upwind_densities(grid4, rho, phi).shape == (grid4.n_faces,)
