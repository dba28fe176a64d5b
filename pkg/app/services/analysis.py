# app/services/analysis.py
"""Reference solutions, error norms, convergence tables and dissipation series."""
import logging
from concurrent.futures import ProcessPoolExecutor
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from numpy.polynomial.legendre import leggauss
from scipy.special import xlogy

from app.config import DEFAULT_G
from app.errors import InvalidInputError
from app.schemas.config import NewtonConfig
from app.schemas.results import ConvergenceRow
from app.services.dissipation import potential_jumps, upwind_densities
from app.services.energy import EnergyModel, FokkerPlanckEnergy, linear_potential
from app.services.euler_fv import run_euler_flow
from app.services.ljko_solver import Trajectory, run_flow
from app.services.mesh import Mesh, build_triangulation, refine_midpoint

logger = logging.getLogger(__name__)

Triangulation = Tuple[np.ndarray, np.ndarray]
ExactSolution = Callable[[np.ndarray, np.ndarray, float], np.ndarray]


def fp_exact(x, y, t: float, g: float = DEFAULT_G):
    """Fokker-Planck solution on the unit square for V = -g x with no-flux walls."""
    x = np.asarray(x, dtype=float)
    alpha = np.pi ** 2 + 0.25 * g ** 2
    transient = np.exp(-alpha * t + 0.5 * g * x) * (np.pi * np.cos(np.pi * x) + 0.5 * g * np.sin(np.pi * x))
    return transient + np.pi * np.exp(g * (x - 0.5)) + 0.0 * np.asarray(y, dtype=float)


def sample_at_centers(mesh: Mesh, func: ExactSolution, t: float) -> np.ndarray:
    centers = mesh.cell_centers
    return np.asarray(func(centers[:, 0], centers[:, 1], t), dtype=float)


def cell_average(mesh: Mesh, func: Callable, order: int = 4) -> np.ndarray:
    """Cell means of func(x, y) by Gauss-Legendre quadrature.

    Triangles use the collapsed (Duffy) square rule, axis-aligned
    rectangles the tensor rule.
    """
    nodes, weights = leggauss(order)
    u, w = 0.5 * (nodes + 1.0), 0.5 * weights
    uu, vv = np.meshgrid(u, u, indexing="ij")
    ww = np.outer(w, w)
    verts = mesh.cell_vertices
    if verts.shape[1] == 3:
        a, b, c = verts[:, 0], verts[:, 1], verts[:, 2]
        xi, eta = uu.ravel(), (vv * (1.0 - uu)).ravel()
        points = a[:, None] + xi[None, :, None] * (b - a)[:, None] + eta[None, :, None] * (c - a)[:, None]
        quad = 2.0 * (ww * (1.0 - uu)).ravel()
    else:
        low, high = verts.min(axis=1), verts.max(axis=1)
        span = high - low
        points = np.stack([
            low[:, None, 0] + uu.ravel()[None, :] * span[:, None, 0],
            low[:, None, 1] + vv.ravel()[None, :] * span[:, None, 1],
        ], axis=-1)
        quad = ww.ravel()
    values = np.asarray(func(points[..., 0], points[..., 1]), dtype=float)
    return values @ quad


def error_norms(trajectory: Trajectory, exact: ExactSolution, mesh: Mesh) -> Tuple[float, float]:
    """Discrete L-infinity-in-time and L1-in-time of the L1 error at cell centers."""
    errors = np.array([
        np.sum(np.abs(np.asarray(state.rho) - sample_at_centers(mesh, exact, t)) * mesh.cell_measures)
        for state, t in zip(trajectory.states, trajectory.times)
    ])
    return float(errors.max()), float(np.sum(trajectory.taus[1:] * errors[1:]))


def convergence_rate(previous: Optional[float], current: float) -> Optional[float]:
    if previous is None or previous <= 0 or current <= 0:
        return None
    return float(np.log2(previous / current))


def _as_triangulation(mesh0: Union[Mesh, Triangulation]) -> Triangulation:
    if isinstance(mesh0, Mesh):
        if mesh0.triangles is None:
            raise InvalidInputError("convergence studies refine triangulations only")
        return np.asarray(mesh0.nodes), np.asarray(mesh0.triangles)
    nodes, triangles = mesh0
    return np.asarray(nodes, dtype=float), np.asarray(triangles)


def _study_level(args) -> Tuple[float, float, float, float]:
    nodes, triangles, tau, t0, t_end, g, scheme, config = args
    mesh = build_triangulation(nodes, triangles)
    energy = FokkerPlanckEnergy(mesh, linear_potential(g))

    def exact(x, y, t):
        return fp_exact(x, y, t, g)

    rho0 = sample_at_centers(mesh, exact, t0)
    run = run_flow if scheme == "ljko" else run_euler_flow
    trajectory = run(mesh, energy, rho0, t_end, config, tau=tau, t0=t0)
    err_linf, err_l1 = error_norms(trajectory, exact, mesh)
    logger.info("%s level h=%.4g dt=%.4g: err_linf=%.4e err_l1=%.4e", scheme, mesh.h, tau, err_linf, err_l1)
    return mesh.h, tau, err_linf, err_l1


def convergence_study(
    mesh0: Union[Mesh, Triangulation],
    levels: int,
    tau0: float,
    t0: float,
    t_end: float,
    g: float = DEFAULT_G,
    scheme: str = "ljko",
    refine: bool = True,
    jobs: int = 1,
    config: Optional[NewtonConfig] = None,
) -> List[ConvergenceRow]:
    """Fixed-step runs on successive midpoint refinements with tau halved per level."""
    if levels < 2:
        raise InvalidInputError(f"a convergence study needs at least 2 levels, got {levels}")
    if scheme not in ("ljko", "euler"):
        raise InvalidInputError(f"unknown scheme {scheme!r}")
    config = (config or NewtonConfig()).model_copy(update={"adaptive": False})

    nodes, triangles = _as_triangulation(mesh0)
    tasks = []
    tau = tau0
    for level in range(levels):
        tasks.append((nodes, triangles, tau, t0, t_end, g, scheme, config))
        if refine:
            nodes, triangles = refine_midpoint(nodes, triangles)
            tau = 0.5 * tau

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_study_level, tasks))
    else:
        results = [_study_level(task) for task in tasks]

    rows = []
    previous = (None, None)
    for h, dt, err_linf, err_l1 in results:
        rows.append(ConvergenceRow(
            h=h,
            dt=dt,
            err_linf=err_linf,
            rate_linf=convergence_rate(previous[0], err_linf),
            err_l1=err_l1,
            rate_l1=convergence_rate(previous[1], err_l1),
        ))
        previous = (err_linf, err_l1)
    return rows


def dissipation_series(trajectory: Trajectory, energy: EnergyModel, reference_energy: float) -> pd.DataFrame:
    """Energy gap E_T(rho^n) - E_ref along a trajectory."""
    gaps = [energy.value(state.rho) - reference_energy for state in trajectory.states]
    return pd.DataFrame({"t": np.asarray(trajectory.times, dtype=float), "dissipation": gaps})


def barenblatt(x, y, m: float, center: Sequence[float] = (0.5, 0.5)):
    """Steady porous-medium profile for the confining potential |x - center|^2 / 2."""
    if not m > 1:
        raise InvalidInputError(f"Barenblatt profile needs m > 1, got {m}")
    r2 = (np.asarray(x, dtype=float) - center[0]) ** 2 + (np.asarray(y, dtype=float) - center[1]) ** 2
    return ((m - 1.0) / (2.0 * m) * np.maximum(1.0 - r2, 0.0)) ** (1.0 / (m - 1.0))


def fp_limit_energy(g: float = DEFAULT_G) -> float:
    """Closed-form energy of the long-time limit pi exp(g (x - 1/2)).

    Energies of the exact solution use the density functional
    int rho log rho - rho + g (1 - x) rho on the unit square.
    """
    if g == 0:
        return float(np.pi * np.log(np.pi) - np.pi)
    common = np.pi * np.log(np.pi) / g + 0.5 * np.pi - np.pi / g
    return float(np.exp(0.5 * g) * common - np.exp(-0.5 * g) * common)


def fp_exact_energy(t: float, g: float = DEFAULT_G, order: int = 200) -> float:
    """Energy of fp_exact at time t, same functional as fp_limit_energy."""
    nodes, weights = leggauss(order)
    x = 0.5 * (nodes + 1.0)
    rho = fp_exact(x, 0.0, t, g)
    return float(0.5 * weights @ (xlogy(rho, rho) - rho + g * (1.0 - x) * rho))


def fp_reference_series(times: Sequence[float], g: float = DEFAULT_G) -> pd.DataFrame:
    """Dissipation of the exact solution against its long-time limit."""
    limit = fp_limit_energy(g)
    times = np.asarray(times, dtype=float)
    return pd.DataFrame({"t": times, "dissipation": [fp_exact_energy(t, g) - limit for t in times]})


def lower_bound_series(trajectory: Trajectory, potential: np.ndarray) -> np.ndarray:
    """min_K [log rho_K^n + V_K] for every stored state."""
    potential = np.asarray(potential, dtype=float)
    return np.array([np.min(np.log(np.asarray(state.rho)) + potential) for state in trajectory.states])


def dissipation_sum(trajectory: Trajectory, mesh: Mesh) -> float:
    """sum_n tau^n sum_sigma a_sigma rho_sigma^n (phi_K^n - phi_L^n)^2."""
    total = 0.0
    for state, tau in zip(trajectory.states[1:], trajectory.taus[1:]):
        jump = potential_jumps(mesh, state.phi)
        a = mesh.transmissivities.reshape((-1,) + (1,) * (jump.ndim - 1))
        total += tau * float(np.sum(a * upwind_densities(mesh, state.rho, state.phi) * jump ** 2))
    return total
