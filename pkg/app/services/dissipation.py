# app/services/dissipation.py
"""Upstream-weighted dissipation potentials and the coupled HJ/continuity residuals.

Fields are per-cell arrays of shape (N,) or (N, S) for S species; every
face quantity keeps the trailing species axis.
"""
import logging

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from app.config import (
    HJ_BACKTRACK_FACTOR,
    HJ_MAX_BACKTRACKS,
    HJ_MAX_ITER,
    KANTOROVICH_MAX_ITER,
    MEAN_ZERO_TOL,
    NEWTON_TOL,
)
from app.errors import InvalidInputError, SolverFailureError
from app.services.mesh import Mesh

logger = logging.getLogger(__name__)


def _per_face(mesh: Mesh, values: np.ndarray) -> np.ndarray:
    return mesh.transmissivities.reshape((-1,) + (1,) * (values.ndim - 1))


def _per_cell(mesh: Mesh, values: np.ndarray) -> np.ndarray:
    return mesh.cell_measures.reshape((-1,) + (1,) * (values.ndim - 1))


def potential_jumps(mesh: Mesh, phi: np.ndarray) -> np.ndarray:
    """phi_K - phi_L on every internal face."""
    phi = np.asarray(phi, dtype=float)
    return phi[mesh.face_cells[:, 0]] - phi[mesh.face_cells[:, 1]]


def upwind_densities(mesh: Mesh, rho: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """Face densities taken from the cell the potential decreases away from."""
    rho = np.asarray(rho, dtype=float)
    rho_k, rho_l = rho[mesh.face_cells[:, 0]], rho[mesh.face_cells[:, 1]]
    jump = potential_jumps(mesh, phi)
    return np.where(jump > 0, rho_k, np.where(jump < 0, rho_l, 0.5 * (rho_k + rho_l)))


def upwind_value(mesh: Mesh, rho: np.ndarray, phi: np.ndarray, face: int) -> np.ndarray:
    if not 0 <= face < mesh.n_faces:
        raise InvalidInputError(f"face {face} is not an internal face")
    return upwind_densities(mesh, rho, phi)[face]


def face_fluxes(mesh: Mesh, rho: np.ndarray, phi: np.ndarray) -> np.ndarray:
    """a_sigma rho_sigma (phi_K - phi_L), oriented K to L."""
    jump = potential_jumps(mesh, phi)
    return _per_face(mesh, jump) * upwind_densities(mesh, rho, phi) * jump


def divergence(mesh: Mesh, fluxes: np.ndarray) -> np.ndarray:
    """Net outflow of every cell for oriented face fluxes."""
    return mesh.incidence @ np.asarray(fluxes, dtype=float)


def psi_star(mesh: Mesh, rho: np.ndarray, phi: np.ndarray) -> float:
    jump = potential_jumps(mesh, phi)
    return float(0.5 * np.sum(_per_face(mesh, jump) * upwind_densities(mesh, rho, phi) * jump ** 2))


def weighted_laplacian(mesh: Mesh, weights: np.ndarray) -> sp.csr_matrix:
    """Sparse matrix of phi -> sum_sigma w_sigma (phi_K - phi_L)."""
    weights = sp.diags(np.asarray(weights, dtype=float), 0, shape=(mesh.n_faces, mesh.n_faces))
    return (mesh.incidence @ weights @ mesh.incidence.T).tocsr()


def transport_matrix(mesh: Mesh, phi: np.ndarray, tau: float) -> sp.csr_matrix:
    """Upwind transport matrix of a single-species potential.

    ``A[K, K] = tau * sum a (phi_K - phi_L)^+`` and
    ``A[K, L] = -tau * a (phi_L - phi_K)^+``; columns sum to zero.
    """
    jump = potential_jumps(mesh, phi)
    a = mesh.transmissivities
    out_k = tau * a * np.maximum(jump, 0.0)
    out_l = tau * a * np.maximum(-jump, 0.0)
    k, l = mesh.face_cells[:, 0], mesh.face_cells[:, 1]
    diagonal = mesh.owner_selector @ out_k + mesh.neighbour_selector @ out_l
    n = mesh.n_cells
    rows = np.concatenate([np.arange(n), k, l])
    cols = np.concatenate([np.arange(n), l, k])
    vals = np.concatenate([diagonal, -out_l, -out_k])
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))


def hj_residual(mesh: Mesh, phi: np.ndarray, f: np.ndarray, tau: float) -> np.ndarray:
    """G(phi) - f with G_K = phi_K + tau/(2 m_K) sum a ((phi_K - phi_L)^+)^2."""
    if tau < 0:
        raise InvalidInputError(f"tau must be >= 0, got {tau}")
    phi = np.asarray(phi, dtype=float)
    jump = potential_jumps(mesh, phi)
    a = _per_face(mesh, jump)
    outgoing = mesh.owner_selector @ (a * np.maximum(jump, 0.0) ** 2)
    outgoing = outgoing + mesh.neighbour_selector @ (a * np.maximum(-jump, 0.0) ** 2)
    return phi + tau / (2.0 * _per_cell(mesh, phi)) * outgoing - np.asarray(f, dtype=float)


def continuity_residual(mesh: Mesh, rho: np.ndarray, rho_prev: np.ndarray, phi: np.ndarray, tau: float) -> np.ndarray:
    rho = np.asarray(rho, dtype=float)
    change = (rho - np.asarray(rho_prev, dtype=float)) * _per_cell(mesh, rho)
    return change + tau * divergence(mesh, face_fluxes(mesh, rho, phi))


def solve_hj(
    mesh: Mesh,
    f: np.ndarray,
    tau: float,
    tol: float = NEWTON_TOL,
    max_iter: int = HJ_MAX_ITER,
) -> np.ndarray:
    """Unique phi with G(phi) = f, by damped Newton started at f."""
    f = np.asarray(f, dtype=float)
    if f.ndim != 1 or f.shape[0] != mesh.n_cells or not np.isfinite(f).all():
        raise InvalidInputError("f must be a finite per-cell vector")
    if tau == 0 or mesh.n_faces == 0:
        return f.copy()

    phi = f.copy()
    residual = hj_residual(mesh, phi, f, tau)
    norm = np.abs(residual).max()
    threshold = tol * max(1.0, np.abs(f).max())
    inverse_measures = sp.diags(1.0 / mesh.cell_measures)
    for iteration in range(max_iter):
        if norm <= threshold:
            break
        jacobian = sp.identity(mesh.n_cells) + inverse_measures @ transport_matrix(mesh, phi, tau).T
        step = spsolve(jacobian.tocsc(), residual)
        damping = 1.0
        for _ in range(HJ_MAX_BACKTRACKS):
            trial = phi - damping * step
            trial_residual = hj_residual(mesh, trial, f, tau)
            trial_norm = np.abs(trial_residual).max()
            if trial_norm < norm:
                break
            damping *= HJ_BACKTRACK_FACTOR
        phi, residual, norm = trial, trial_residual, trial_norm
        logger.debug("solve_hj iter=%d residual=%.3e damping=%.3g", iteration + 1, norm, damping)
    else:
        if norm > threshold:
            raise SolverFailureError("HJ solve did not converge", iterations=max_iter, residual_linf=norm, tau=tau)
    return phi


def _potential_objective(mesh: Mesh, rho: np.ndarray, source: np.ndarray, phi: np.ndarray) -> float:
    return psi_star(mesh, rho, phi) - float(source @ phi)


def kantorovich_potential(
    mesh: Mesh,
    rho: np.ndarray,
    h: np.ndarray,
    tol: float = NEWTON_TOL,
    max_iter: int = KANTOROVICH_MAX_ITER,
) -> np.ndarray:
    """Potential phi with h_K m_K = sum a rho_sigma (phi_K - phi_L), mass-weighted mean zero.

    Damped Newton on the convex piecewise-quadratic objective
    Psi*(rho; phi) - <h, phi>, with the gauge enforced by a bordered system.
    """
    rho = np.asarray(rho, dtype=float)
    h = np.asarray(h, dtype=float)
    if rho.shape != (mesh.n_cells,) or h.shape != (mesh.n_cells,):
        raise InvalidInputError("rho and h must be single-species per-cell vectors")
    if not (rho > 0).all():
        raise InvalidInputError("kantorovich_potential needs a strictly positive density")
    m = mesh.cell_measures
    source = h * m
    scale = np.abs(source).sum()
    if abs(source.sum()) > MEAN_ZERO_TOL * max(scale, np.finfo(float).tiny):
        raise InvalidInputError(f"source must have zero mean, got <h, 1> = {source.sum():.3e}")
    phi = np.zeros(mesh.n_cells)
    if scale == 0.0:
        return phi

    threshold = tol * max(1.0, np.abs(source).max())
    border = sp.csr_matrix(m.reshape(1, -1))
    objective = _potential_objective(mesh, rho, source, phi)
    for iteration in range(max_iter + 1):
        residual = divergence(mesh, face_fluxes(mesh, rho, phi)) - source
        norm = np.abs(residual).max()
        if norm <= threshold:
            return phi - (m @ phi) / m.sum()
        if iteration == max_iter:
            break
        weights = mesh.transmissivities * upwind_densities(mesh, rho, phi)
        system = sp.bmat([[weighted_laplacian(mesh, weights), border.T], [border, None]], format="csc")
        step = spsolve(system, np.concatenate([residual, [m @ phi]]))[:-1]
        damping = 1.0
        for _ in range(HJ_MAX_BACKTRACKS):
            trial = phi - damping * step
            trial_objective = _potential_objective(mesh, rho, source, trial)
            if trial_objective <= objective:
                break
            damping *= HJ_BACKTRACK_FACTOR
        phi, objective = trial, trial_objective
    raise SolverFailureError("Kantorovich potential did not converge", iterations=max_iter, residual_linf=norm)


def psi(mesh: Mesh, rho: np.ndarray, h: np.ndarray) -> float:
    """Psi(rho; h) = <h, phi>_T / 2 through the Kantorovich potential."""
    phi = kantorovich_potential(mesh, rho, h)
    return float(0.5 * np.sum(np.asarray(h, dtype=float) * phi * mesh.cell_measures))
