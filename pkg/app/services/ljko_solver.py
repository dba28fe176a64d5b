# app/services/ljko_solver.py
"""Newton solver for the coupled HJ/continuity step and the adaptive time march.

Unknowns are ordered cell-major: entry ``K * S + s`` belongs to species
``s`` of cell ``K``. The Newton matrix is assembled in the variables
(-phi, rho), which makes it symmetric::

    [ -tau L_rho     M + A ] [ d_phi ]   [ f_phi ]
    [ (M + A)^T      D     ] [ d_rho ] = [ f_rho ]

with f_phi the negated continuity residual and f_rho the HJ residual
scaled by the cell measures. The update is phi -= d_phi, rho += d_rho.
"""
import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.sparse as sp
from scipy.sparse.linalg import spsolve

from app.config import BLOCK_CONDITION_TOL, NEWTON_BACKTRACK_FACTOR, NEWTON_MAX_BACKTRACKS
from app.errors import InvalidInputError, SolverFailureError
from app.schemas.config import NewtonConfig
from app.services.dissipation import (
    continuity_residual,
    hj_residual,
    psi_star,
    transport_matrix,
    upwind_densities,
    weighted_laplacian,
)
from app.services.energy import EnergyModel, species_mass
from app.services.mesh import Mesh

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LjkoState:
    rho: np.ndarray
    phi: np.ndarray
    tau_used: float
    newton_iters: int
    residual_linf: float


@dataclass(frozen=True)
class Trajectory:
    """Accepted states of a flow with per-step bookkeeping.

    ``dissipation[n]`` is Psi_T(rho^n; rho^{n-1} - rho^n) / tau^n, zero at n = 0.
    """
    times: np.ndarray
    taus: np.ndarray
    energies: np.ndarray
    masses: np.ndarray
    newton_iters: np.ndarray
    dissipation: np.ndarray
    states: Tuple

    def __len__(self) -> int:
        return len(self.states)

    @property
    def densities(self) -> np.ndarray:
        return np.stack([state.rho for state in self.states])

    @property
    def final(self):
        return self.states[-1]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame({"t": self.times, "tau": self.taus, "energy": self.energies})
        for s in range(self.masses.shape[1]):
            frame["mass" if s == 0 else f"mass{s + 1}"] = self.masses[:, s]
        frame["newton_iters"] = self.newton_iters
        return frame


@dataclass(frozen=True)
class NewtonSystem:
    j_phiphi: sp.csr_matrix
    j_phirho: sp.csr_matrix
    j_rhophi: sp.csr_matrix
    hessian_blocks: np.ndarray
    f_phi: np.ndarray
    f_rho: np.ndarray

    @property
    def j_rhorho(self) -> sp.csr_matrix:
        return block_diagonal(self.hessian_blocks)

    def matrix(self) -> sp.csr_matrix:
        return sp.bmat(
            [[self.j_phiphi, self.j_phirho], [self.j_rhophi, self.j_rhorho]], format="csr"
        )

    def rhs(self) -> np.ndarray:
        return np.concatenate([self.f_phi, self.f_rho])


def as_columns(mesh: Mesh, field: np.ndarray) -> np.ndarray:
    """View a (N,) or (N, S) field as (N, S)."""
    field = np.asarray(field, dtype=float)
    if field.shape[0] != mesh.n_cells or field.ndim not in (1, 2):
        raise InvalidInputError(f"field of shape {field.shape} does not match {mesh.n_cells} cells")
    return field.reshape(mesh.n_cells, -1)


def interleave(blocks: Sequence[sp.spmatrix]) -> sp.csr_matrix:
    """Place per-species N x N matrices at the cell-major positions."""
    count = len(blocks)
    n = blocks[0].shape[0]
    rows, cols, vals = [], [], []
    for s, block in enumerate(blocks):
        coo = sp.coo_matrix(block)
        rows.append(coo.row * count + s)
        cols.append(coo.col * count + s)
        vals.append(coo.data)
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n * count, n * count)
    )


def block_diagonal(blocks: np.ndarray) -> sp.csr_matrix:
    """Sparse matrix of (N, S, S) cell blocks."""
    n, count, _ = blocks.shape
    base = (np.arange(n) * count)[:, None, None]
    rows = np.broadcast_to(base + np.arange(count)[None, :, None], blocks.shape)
    cols = np.broadcast_to(base + np.arange(count)[None, None, :], blocks.shape)
    return sp.csr_matrix((blocks.ravel(), (rows.ravel(), cols.ravel())), shape=(n * count, n * count))


def invert_blocks(blocks: np.ndarray) -> np.ndarray:
    count = blocks.shape[1]
    if count == 1:
        return 1.0 / blocks
    if count == 2:
        a, b, c, d = blocks[:, 0, 0], blocks[:, 0, 1], blocks[:, 1, 0], blocks[:, 1, 1]
        det = a * d - b * c
        return np.stack([np.stack([d, -b], axis=-1), np.stack([-c, a], axis=-1)], axis=1) / det[:, None, None]
    return np.linalg.inv(blocks)


def _hj_source(mesh: Mesh, energy: EnergyModel, rho: np.ndarray) -> np.ndarray:
    return energy.gradient(rho) / mesh.cell_measures[:, None]


def assemble_newton_system(
    mesh: Mesh,
    energy: EnergyModel,
    state_k,
    rho_prev: np.ndarray,
    tau: float,
) -> NewtonSystem:
    """Blocks and right-hand sides at the iterate ``(state_k.phi, state_k.rho)``."""
    rho = as_columns(mesh, state_k.rho)
    phi = as_columns(mesh, state_k.phi)
    rho_prev = as_columns(mesh, rho_prev)
    measures = sp.diags(mesh.cell_measures)

    laplacians, transports = [], []
    for s in range(rho.shape[1]):
        weights = mesh.transmissivities * upwind_densities(mesh, rho[:, s], phi[:, s])
        laplacians.append(-tau * weighted_laplacian(mesh, weights))
        transports.append(measures + transport_matrix(mesh, phi[:, s], tau))
    j_phirho = interleave(transports)

    hj = mesh.cell_measures[:, None] * hj_residual(mesh, phi, _hj_source(mesh, energy, rho), tau)
    return NewtonSystem(
        j_phiphi=interleave(laplacians),
        j_phirho=j_phirho,
        j_rhophi=j_phirho.T.tocsr(),
        hessian_blocks=energy.hessian_blocks(rho),
        f_phi=-continuity_residual(mesh, rho, rho_prev, phi, tau).ravel(),
        f_rho=hj.ravel(),
    )


def schur_matrix(system: NewtonSystem) -> sp.csr_matrix:
    """J_phiphi - J_phirho D^-1 J_rhophi, symmetrized."""
    inverse = block_diagonal(invert_blocks(system.hessian_blocks))
    schur = system.j_phiphi - system.j_phirho @ inverse @ system.j_rhophi
    return (0.5 * (schur + schur.T)).tocsr()


def _check_direction(system: NewtonSystem, d_phi: np.ndarray, d_rho: np.ndarray, method: str):
    if not (np.isfinite(d_phi).all() and np.isfinite(d_rho).all()):
        raise SolverFailureError(f"{method} linear solve broke down")
    direction = np.concatenate([d_phi, d_rho])
    rhs = system.rhs()
    mismatch = np.abs(system.matrix() @ direction - rhs).max()
    scale = max(np.abs(rhs).max(), np.finfo(float).tiny)
    if mismatch > 1e-12 * scale:
        logger.debug("%s solve relative residual %.3e", method, mismatch / scale)
    return d_phi, d_rho


def schur_solve(system: NewtonSystem) -> Tuple[np.ndarray, np.ndarray]:
    """Eliminate the density block and solve the negated Schur system."""
    if not (np.any(system.f_phi) or np.any(system.f_rho)):
        return np.zeros_like(system.f_phi), np.zeros_like(system.f_rho)
    inverse = block_diagonal(invert_blocks(system.hessian_blocks))
    rhs = system.f_phi - system.j_phirho @ (inverse @ system.f_rho)
    d_phi = spsolve((-schur_matrix(system)).tocsc(), -rhs)
    d_rho = inverse @ (system.f_rho - system.j_rhophi @ d_phi)
    return _check_direction(system, np.atleast_1d(d_phi), d_rho, "Schur")


def block_solve(system: NewtonSystem) -> Tuple[np.ndarray, np.ndarray]:
    """Sparse LU of the whole saddle system."""
    size = system.f_phi.size
    solution = np.atleast_1d(spsolve(system.matrix().tocsc(), system.rhs()))
    return _check_direction(system, solution[:size], solution[size:], "block")


def density_block_ratio(system: NewtonSystem) -> float:
    eigenvalues = np.linalg.eigvalsh(system.hessian_blocks)
    largest = eigenvalues.max()
    return float(eigenvalues.min() / largest) if largest > 0 else 0.0


def solve_direction(system: NewtonSystem, method: str = "auto") -> Tuple[np.ndarray, np.ndarray]:
    if method == "schur":
        return schur_solve(system)
    if method == "block":
        return block_solve(system)
    ratio = density_block_ratio(system)
    if ratio < BLOCK_CONDITION_TOL:
        logger.debug("Density block ratio %.3e, using the block solve", ratio)
        return block_solve(system)
    try:
        return schur_solve(system)
    except SolverFailureError as err:
        logger.warning("%s; falling back to the block solve", err)
        return block_solve(system)


def density_floor(mesh: Mesh, rho: np.ndarray, config: NewtonConfig) -> np.ndarray:
    """Per-species floor for the Newton iterates."""
    if config.density_floor is not None:
        return np.full(rho.shape[1], config.density_floor)
    return config.density_floor_factor * species_mass(mesh, rho) / mesh.domain_area


def check_previous(mesh: Mesh, rho_prev: np.ndarray, tau: float) -> np.ndarray:
    rho = as_columns(mesh, rho_prev)
    if not np.isfinite(rho).all() or (rho < 0).any():
        raise InvalidInputError("previous density must be finite and nonnegative")
    if (species_mass(mesh, rho) <= 0).any():
        raise InvalidInputError("every species needs a positive total mass")
    if not tau > 0:
        raise InvalidInputError(f"tau must be positive, got {tau}")
    return rho


def residual_linf(mesh, energy, rho, phi, rho_prev, tau, floor=None) -> float:
    """Unscaled sup norm over the HJ and continuity residuals.

    With a ``floor``, cells held at it only count a positive HJ residual:
    there the HJ equation relaxes to G(phi) <= dE/drho.
    """
    hj = hj_residual(mesh, phi, _hj_source(mesh, energy, rho), tau)
    if floor is not None:
        hj = np.where(rho <= floor, np.maximum(hj, 0.0), hj)
    continuity = continuity_residual(mesh, rho, rho_prev, phi, tau)
    return float(max(np.abs(hj).max(), np.abs(continuity).max()))


def _update(mesh, energy, rho, phi, d_phi, d_rho, rho_prev, tau, floor, residual):
    """Projected Newton update, backtracked while the residual does not drop."""
    full = None
    damping = 1.0
    for _ in range(NEWTON_MAX_BACKTRACKS + 1):
        trial_phi = phi - damping * d_phi
        trial_rho = np.maximum(rho + damping * d_rho, floor)
        trial = residual_linf(mesh, energy, trial_rho, trial_phi, rho_prev, tau, floor)
        if full is None:
            full = (trial_rho, trial_phi, trial)
        if trial < residual:
            return trial_rho, trial_phi, trial
        damping *= NEWTON_BACKTRACK_FACTOR
    return full


def _newton(mesh, energy, rho_prev, phi0, tau, floor, config: NewtonConfig, step) -> LjkoState:
    rho = np.maximum(rho_prev, floor)
    phi = phi0.copy()
    residual = residual_linf(mesh, energy, rho, phi, rho_prev, tau, floor)
    best, stalled = np.inf, 0
    for iteration in range(config.max_iter + 1):
        logger.debug("step=%s tau=%.3e iter=%d residual=%.3e", step, tau, iteration, residual)
        if not np.isfinite(residual):
            break
        if residual <= config.tol_linf:
            return LjkoState(rho=rho, phi=phi, tau_used=tau, newton_iters=iteration, residual_linf=residual)
        if residual < best:
            best, stalled = residual, 0
        else:
            stalled += 1
            if stalled >= config.stagnation_window:
                raise SolverFailureError("LJKO Newton stagnated", iteration, residual, tau, step)
        if iteration == config.max_iter:
            break
        system = assemble_newton_system(mesh, energy, LjkoState(rho, phi, tau, iteration, residual), rho_prev, tau)
        d_phi, d_rho = solve_direction(system, config.linear_solver)
        rho, phi, residual = _update(
            mesh, energy, rho, phi, d_phi.reshape(phi.shape), d_rho.reshape(rho.shape), rho_prev, tau, floor, residual
        )
    raise SolverFailureError("LJKO Newton did not converge", iteration, residual, tau, step)


def ljko_step(
    mesh: Mesh,
    energy: EnergyModel,
    rho_prev: np.ndarray,
    tau: float,
    config: Optional[NewtonConfig] = None,
    phi_init: Optional[np.ndarray] = None,
    step: Optional[int] = None,
) -> LjkoState:
    """One implicit step; with adaptive stepping, failures restart at tau * tau_decrease."""
    config = config or NewtonConfig()
    shape = np.shape(rho_prev)
    rho_prev = check_previous(mesh, rho_prev, tau)
    phi0 = np.zeros_like(rho_prev) if phi_init is None else as_columns(mesh, phi_init).copy()
    floor = density_floor(mesh, rho_prev, config)

    tau_try = tau
    while True:
        try:
            state = _newton(mesh, energy, rho_prev, phi0, tau_try, floor, config, step)
            break
        except SolverFailureError as err:
            if not config.adaptive:
                raise
            tau_next = tau_try * config.tau_decrease
            if tau_next < config.tau_min:
                raise SolverFailureError(
                    "LJKO step failed at the smallest time step", err.iterations, err.residual_linf, tau_try, step
                ) from err
            logger.warning("Step %s: %s; restarting with tau=%.3e", step, err, tau_next)
            tau_try = tau_next
    return LjkoState(
        rho=state.rho.reshape(shape),
        phi=state.phi.reshape(shape),
        tau_used=state.tau_used,
        newton_iters=state.newton_iters,
        residual_linf=state.residual_linf,
    )


def march(
    step_fn: Callable,
    mesh: Mesh,
    energy: EnergyModel,
    rho0: np.ndarray,
    t_end: float,
    tau: float,
    config: NewtonConfig,
    t0: float = 0.0,
    initial_state=None,
) -> Trajectory:
    """Time loop shared by the implicit schemes.

    ``step_fn(rho_prev, tau, phi_prev, n)`` returns a state with ``rho``,
    ``phi``, ``tau_used`` and ``newton_iters``.
    """
    if t_end < t0:
        raise InvalidInputError(f"t_end ({t_end}) precedes t0 ({t0})")
    if not tau > 0:
        raise InvalidInputError(f"tau must be positive, got {tau}")
    rho = np.asarray(rho0, dtype=float)
    if config.adaptive:
        tau = min(max(tau, config.tau_min), config.tau_max)
    if initial_state is None:
        initial_state = LjkoState(rho=rho, phi=np.zeros_like(rho), tau_used=0.0, newton_iters=0, residual_linf=0.0)

    states = [initial_state]
    times, taus, iters, dissipation = [t0], [0.0], [0], [0.0]
    energies = [energy.value(rho)]
    masses = [species_mass(mesh, rho)]
    t, phi, n = t0, None, 0
    # steps shorter than this fraction of the horizon are absorbed into the last one
    slack = 1e-9 * (t_end - t0)
    while t_end - t > slack:
        n += 1
        tau_step = min(tau, t_end - t)
        state = step_fn(rho, tau_step, phi, n)
        t = t + state.tau_used
        if t_end - t <= slack:
            t = t_end
        rho, phi = state.rho, state.phi
        states.append(state)
        times.append(t)
        taus.append(state.tau_used)
        iters.append(state.newton_iters)
        energies.append(energy.value(rho))
        masses.append(species_mass(mesh, rho))
        dissipation.append(state.tau_used * psi_star(mesh, rho, phi))
        logger.debug("Accepted step %d: t=%.6g tau=%.3e energy=%.12g", n, t, state.tau_used, energies[-1])

        if config.adaptive:
            if state.tau_used < tau_step:
                tau = state.tau_used
            elif state.newton_iters <= config.iter_fast_threshold and tau_step == tau:
                tau = min(tau * config.tau_increase, config.tau_max)

    return Trajectory(
        times=np.asarray(times),
        taus=np.asarray(taus),
        energies=np.asarray(energies),
        masses=np.asarray(masses),
        newton_iters=np.asarray(iters, dtype=int),
        dissipation=np.asarray(dissipation),
        states=tuple(states),
    )


def run_flow(
    mesh: Mesh,
    energy: EnergyModel,
    rho0: np.ndarray,
    t_end: float,
    config: Optional[NewtonConfig] = None,
    tau: Optional[float] = None,
    t0: float = 0.0,
) -> Trajectory:
    """March the LJKO scheme from t0 to t_end; tau defaults to tau_max."""
    config = config or NewtonConfig()

    def step(rho_prev, tau_step, phi_prev, n):
        return ljko_step(mesh, energy, rho_prev, tau_step, config, phi_init=phi_prev, step=n)

    return march(step, mesh, energy, rho0, t_end, config.tau_max if tau is None else tau, config, t0)
