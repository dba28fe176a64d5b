# app/services/scenarios.py
"""Meshes, energies and initial densities described by a RunConfig."""
import logging
from dataclasses import dataclass

import numpy as np

from app.errors import InvalidInputError
from app.loaders.mesh_loader import load_mesh
from app.schemas.config import EnergySpec, InitialSpec, MeshSpec, RunConfig
from app.services.analysis import barenblatt, cell_average, fp_exact, sample_at_centers
from app.services.energy import (
    EnergyModel,
    fp_equilibrium,
    make_energy,
    potential_for,
    species_mass,
)
from app.services.mesh import (
    Mesh,
    build_cartesian,
    build_triangulation,
    refine_midpoint,
    staggered_triangulation,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Scenario:
    mesh: Mesh
    energy: EnergyModel
    rho0: np.ndarray


def build_mesh(spec: MeshSpec) -> Mesh:
    if spec.kind == "cartesian":
        return build_cartesian(spec.nx, spec.ny, spec.domain)
    if spec.kind == "staggered":
        nodes, triangles = staggered_triangulation(spec.n, spec.m, spec.domain)
        for _ in range(spec.level):
            nodes, triangles = refine_midpoint(nodes, triangles)
        return build_triangulation(nodes, triangles)
    return load_mesh(spec.path, spec.level if spec.kind == "refined" else 0)


def _salinity_layers(mesh: Mesh) -> np.ndarray:
    x = mesh.cell_centers[:, 0]
    fresh = 0.5 + 0.4 * np.tanh((0.5 - x) / 0.1)
    salt = 0.5 + 0.4 * np.tanh((x - 0.5) / 0.1)
    return np.column_stack([fresh, salt])


def _blob(mesh: Mesh, spec: InitialSpec) -> np.ndarray:
    cx, cy = spec.center
    r2 = spec.radius ** 2
    rho = cell_average(mesh, lambda x, y: ((x - cx) ** 2 + (y - cy) ** 2 <= r2).astype(float))
    total = float(mesh.cell_measures @ rho)
    if total <= 0:
        raise InvalidInputError(f"blob of radius {spec.radius} misses every quadrature point of the mesh")
    return spec.mass / total * rho


def initial_density(mesh: Mesh, spec: InitialSpec, energy: EnergySpec, t0: float = 0.0) -> np.ndarray:
    """Initial cell values, floored from below by ``spec.floor``."""
    if (spec.kind == "salinity") != (energy.kind == "salinity"):
        raise InvalidInputError(f"initial data '{spec.kind}' does not fit energy '{energy.kind}'")
    if spec.kind == "fp_exact":
        time = t0 if spec.time is None else spec.time
        rho = sample_at_centers(mesh, lambda x, y, t: fp_exact(x, y, t, energy.g), time)
    elif spec.kind == "equilibrium":
        if energy.kind != "fokker_planck":
            raise InvalidInputError("equilibrium initial data is defined for the Fokker-Planck energy")
        rho = fp_equilibrium(mesh, potential_for(energy), spec.mass)
    elif spec.kind == "uniform":
        rho = np.full(mesh.n_cells, spec.mass / mesh.domain_area)
    elif spec.kind == "blob":
        rho = _blob(mesh, spec)
    elif spec.kind == "barenblatt":
        if energy.kind != "porous_medium":
            raise InvalidInputError("Barenblatt initial data needs the porous medium energy")
        centers = mesh.cell_centers
        rho = barenblatt(centers[:, 0], centers[:, 1], energy.m)
    else:
        rho = _salinity_layers(mesh)
    rho = np.maximum(rho, spec.floor)
    if (rho < 0).any():
        raise InvalidInputError(f"initial density negative at {int((rho < 0).sum())} cells; set a floor")
    return rho


def build_scenario(config: RunConfig) -> Scenario:
    mesh = build_mesh(config.mesh)
    energy = make_energy(config.energy, mesh)
    rho0 = initial_density(mesh, config.initial, config.energy, config.t0)
    logger.info(
        "Scenario: %s energy on %d cells, initial mass %s",
        config.energy.kind, mesh.n_cells, np.array2string(species_mass(mesh, rho0), precision=12),
    )
    return Scenario(mesh=mesh, energy=energy, rho0=rho0)
