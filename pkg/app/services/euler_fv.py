# app/services/euler_fv.py
"""Backward-Euler upstream-mobility finite volumes, the baseline scheme."""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from app.errors import DomainError, SolverFailureError
from app.schemas.config import NewtonConfig
from app.services.dissipation import (
    continuity_residual,
    transport_matrix,
    upwind_densities,
    weighted_laplacian,
)
from app.services.energy import EnergyModel
from app.services.ljko_solver import (
    Trajectory,
    as_columns,
    block_diagonal,
    check_previous,
    density_floor,
    interleave,
    march,
)
from app.services.mesh import Mesh

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EulerState:
    rho: np.ndarray
    phi_check: np.ndarray
    tau_used: float
    newton_iters: int
    residual_linf: float

    @property
    def phi(self) -> np.ndarray:
        return self.phi_check


def potential_of(mesh: Mesh, energy: EnergyModel, rho: np.ndarray) -> np.ndarray:
    """phi_check_K = (1 / m_K) dE/drho_K."""
    return energy.gradient(rho) / mesh.cell_measures[:, None]


def _jacobian(mesh: Mesh, energy: EnergyModel, rho: np.ndarray, phi: np.ndarray, tau: float) -> sp.csr_matrix:
    transports, laplacians = [], []
    measures = sp.diags(mesh.cell_measures)
    for s in range(rho.shape[1]):
        weights = mesh.transmissivities * upwind_densities(mesh, rho[:, s], phi[:, s])
        transports.append(measures + transport_matrix(mesh, phi[:, s], tau))
        laplacians.append(tau * weighted_laplacian(mesh, weights))
    chain = block_diagonal(energy.hessian_blocks(rho) / mesh.cell_measures[:, None, None])
    return (interleave(transports) + interleave(laplacians) @ chain).tocsc()


def _newton(mesh, energy, rho_prev, tau, floor, config: NewtonConfig, step) -> EulerState:
    rho = np.maximum(rho_prev, floor)
    best, stalled = np.inf, 0
    for iteration in range(config.max_iter + 1):
        phi = potential_of(mesh, energy, rho)
        residual = continuity_residual(mesh, rho, rho_prev, phi, tau)
        norm = float(np.abs(residual).max())
        logger.debug("euler step=%s tau=%.3e iter=%d residual=%.3e", step, tau, iteration, norm)
        if not np.isfinite(norm):
            break
        if norm <= config.tol_linf:
            return EulerState(rho=rho, phi_check=phi, tau_used=tau, newton_iters=iteration, residual_linf=norm)
        if norm < best:
            best, stalled = norm, 0
        else:
            stalled += 1
            if stalled >= config.stagnation_window:
                raise SolverFailureError("Euler Newton stagnated", iteration, norm, tau, step)
        if iteration == config.max_iter:
            break
        direction = spsolve(_jacobian(mesh, energy, rho, phi, tau), -residual.ravel())
        if not np.isfinite(direction).all():
            raise SolverFailureError("Euler linear solve broke down", iteration, norm, tau, step)
        rho = np.maximum(rho + np.reshape(direction, rho.shape), floor)
    raise SolverFailureError("Euler Newton did not converge", iteration, norm, tau, step)


def euler_step(
    mesh: Mesh,
    energy: EnergyModel,
    rho_prev: np.ndarray,
    tau: float,
    config: Optional[NewtonConfig] = None,
    step: Optional[int] = None,
) -> EulerState:
    """Solve (rho - rho_prev) m + tau div(a rho_sigma grad phi_check) = 0 for rho."""
    config = config or NewtonConfig()
    shape = np.shape(rho_prev)
    rho_prev = check_previous(mesh, rho_prev, tau)
    floor = density_floor(mesh, rho_prev, config)

    tau_try = tau
    while True:
        try:
            state = _newton(mesh, energy, rho_prev, tau_try, floor, config, step)
            break
        except SolverFailureError as err:
            if not config.adaptive:
                raise
            tau_next = tau_try * config.tau_decrease
            if tau_next < config.tau_min:
                raise SolverFailureError(
                    "Euler step failed at the smallest time step", err.iterations, err.residual_linf, tau_try, step
                ) from err
            logger.warning("Euler step %s: %s; restarting with tau=%.3e", step, err, tau_next)
            tau_try = tau_next
    return EulerState(
        rho=state.rho.reshape(shape),
        phi_check=state.phi_check.reshape(shape),
        tau_used=state.tau_used,
        newton_iters=state.newton_iters,
        residual_linf=state.residual_linf,
    )


def run_euler_flow(
    mesh: Mesh,
    energy: EnergyModel,
    rho0: np.ndarray,
    t_end: float,
    config: Optional[NewtonConfig] = None,
    tau: Optional[float] = None,
    t0: float = 0.0,
) -> Trajectory:
    config = config or NewtonConfig()
    rho0 = np.asarray(rho0, dtype=float)
    try:
        phi0 = potential_of(mesh, energy, as_columns(mesh, rho0)).reshape(rho0.shape)
    except DomainError:
        phi0 = np.zeros_like(rho0)
    initial = EulerState(rho=rho0, phi_check=phi0, tau_used=0.0, newton_iters=0, residual_linf=0.0)

    def step(rho_prev, tau_step, _phi_prev, n):
        return euler_step(mesh, energy, rho_prev, tau_step, config, step=n)

    return march(step, mesh, energy, rho0, t_end, config.tau_max if tau is None else tau, config, t0, initial)
