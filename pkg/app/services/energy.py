# app/services/energy.py
"""Discrete energies with value, gradient and per-cell Hessian blocks.

Densities are (N,) for one species and (N, S) otherwise. Gradients are
the partial derivatives of E_T, so they carry the cell measure m_K.
"""
from abc import ABC, abstractmethod
from typing import Callable, Sequence, Union

import numpy as np
from scipy.special import xlogy

from app.errors import DomainError, InvalidInputError
from app.services.mesh import Mesh

Potential = Union[Callable[[np.ndarray], np.ndarray], Sequence[float], np.ndarray, None]


def sample_potential(mesh: Mesh, potential: Potential) -> np.ndarray:
    """Cell values V_K = V(x_K) of a callable, or a checked per-cell array."""
    if potential is None:
        return np.zeros(mesh.n_cells)
    if callable(potential):
        values = np.asarray(potential(mesh.cell_centers), dtype=float)
    else:
        values = np.asarray(potential, dtype=float)
    values = np.broadcast_to(values, (mesh.n_cells,)).copy()
    if not np.isfinite(values).all():
        raise InvalidInputError("potential must be finite at every cell center")
    return values


def linear_potential(g: float) -> Callable[[np.ndarray], np.ndarray]:
    """V(x) = -g x: constant drift along the first axis."""
    return lambda points: -g * np.asarray(points)[:, 0]


def confining_potential(center=(0.5, 0.5)) -> Callable[[np.ndarray], np.ndarray]:
    """V(x) = |x - center|^2 / 2."""
    c = np.asarray(center, dtype=float)
    return lambda points: 0.5 * ((np.asarray(points) - c) ** 2).sum(axis=1)


class EnergyModel(ABC):
    """Per-cell-local discrete energy on a fixed mesh."""

    species_count: int = 1

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        self.m = mesh.cell_measures

    def _columns(self, rho) -> np.ndarray:
        rho = np.asarray(rho, dtype=float)
        expected = (self.mesh.n_cells,) if self.species_count == 1 else (self.mesh.n_cells, self.species_count)
        if rho.shape != expected and rho.shape != (self.mesh.n_cells, self.species_count):
            raise InvalidInputError(f"density has shape {rho.shape}, expected {expected}")
        return rho.reshape(self.mesh.n_cells, self.species_count)

    def _check_nonnegative(self, rho: np.ndarray) -> None:
        if (rho < 0).any():
            raise InvalidInputError(f"negative density {rho.min():.3e}")

    def value(self, rho) -> float:
        rho = self._columns(rho)
        self._check_nonnegative(rho)
        return float(self._value(rho))

    def gradient(self, rho) -> np.ndarray:
        shape = np.shape(rho)
        return self._gradient(self._columns(rho)).reshape(shape)

    def hessian_blocks(self, rho) -> np.ndarray:
        """Array (N, S, S) of the cell blocks of the Hessian."""
        return self._hessian(self._columns(rho))

    @abstractmethod
    def _value(self, rho: np.ndarray) -> float:
        ...

    @abstractmethod
    def _gradient(self, rho: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def _hessian(self, rho: np.ndarray) -> np.ndarray:
        ...


class FokkerPlanckEnergy(EnergyModel):
    """Relative entropy with respect to exp(-V)."""

    def __init__(self, mesh: Mesh, potential: Potential = None):
        super().__init__(mesh)
        self.V = sample_potential(mesh, potential)

    def _value(self, rho):
        r = rho[:, 0]
        return np.sum(self.m * (xlogy(r, r) + r * self.V - r + np.exp(-self.V)))

    def _positive(self, rho):
        if (rho <= 0).any():
            raise DomainError(f"entropy derivative undefined at density {rho.min():.3e}")
        return rho[:, 0]

    def _gradient(self, rho):
        r = self._positive(rho)
        return (self.m * (np.log(r) + self.V))[:, None]

    def _hessian(self, rho):
        r = self._positive(rho)
        return (self.m / r)[:, None, None]


class PorousMediumEnergy(EnergyModel):
    """Internal energy rho^m / (m - 1) plus potential energy."""

    def __init__(self, mesh: Mesh, exponent: float, potential: Potential = None):
        if not exponent > 1:
            raise InvalidInputError(f"porous medium exponent must be > 1, got {exponent}")
        super().__init__(mesh)
        self.exponent = float(exponent)
        self.V = sample_potential(mesh, potential)

    def _value(self, rho):
        r, q = rho[:, 0], self.exponent
        return np.sum(self.m * (r ** q / (q - 1.0) + r * self.V))

    def _gradient(self, rho):
        self._check_nonnegative(rho)
        r, q = rho[:, 0], self.exponent
        return (self.m * (q / (q - 1.0) * r ** (q - 1.0) + self.V))[:, None]

    def _hessian(self, rho):
        self._check_nonnegative(rho)
        r, q = rho[:, 0], self.exponent
        if q < 2 and (r == 0).any():
            raise DomainError("porous medium Hessian unbounded at zero density for exponent < 2")
        return (self.m * q * r ** (q - 2.0))[:, None, None]


class SalinityEnergy(EnergyModel):
    """Fresh water layer f above a salt water layer g over a bedrock b."""

    species_count = 2

    def __init__(self, mesh: Mesh, nu: float, bedrock: Potential = None):
        if not 0 < nu < 1:
            raise InvalidInputError(f"density ratio nu must lie in (0, 1), got {nu}")
        super().__init__(mesh)
        self.nu = float(nu)
        self.b = sample_potential(mesh, bedrock)

    def _value(self, rho):
        f, g = rho[:, 0], rho[:, 1]
        nu = self.nu
        return np.sum(self.m * (0.5 * nu * (f + g + self.b) ** 2 + 0.5 * (1 - nu) * (g + self.b) ** 2))

    def _gradient(self, rho):
        f, g = rho[:, 0], rho[:, 1]
        nu = self.nu
        return np.column_stack([
            self.m * nu * (f + g + self.b),
            self.m * (nu * f + g + self.b),
        ])

    def _hessian(self, rho):
        block = np.array([[self.nu, self.nu], [self.nu, 1.0]])
        return self.m[:, None, None] * block[None, :, :]


def fp_equilibrium(mesh: Mesh, potential: Potential, total_mass: float) -> np.ndarray:
    """Discrete Fokker-Planck steady state rho_K = M exp(-V_K) of the given mass."""
    if not total_mass > 0:
        raise InvalidInputError(f"total mass must be positive, got {total_mass}")
    weights = np.exp(-sample_potential(mesh, potential))
    return total_mass / np.sum(mesh.cell_measures * weights) * weights


def species_mass(mesh: Mesh, rho: np.ndarray) -> np.ndarray:
    """Mass <rho, 1>_T, one entry per species."""
    rho = np.asarray(rho, dtype=float)
    return mesh.cell_measures @ rho.reshape(mesh.n_cells, -1)


def bedrock_profile(kind: str, height: float = 0.3, center: float = 0.5, width: float = 0.15):
    """Bedrock elevation b(x) along the first axis."""
    if kind == "flat":
        return None
    if kind == "bump":
        return lambda points: height * np.exp(-(((np.asarray(points)[:, 0] - center) / width) ** 2))
    if kind == "slope":
        return lambda points: height * (1.0 - np.asarray(points)[:, 0])
    raise InvalidInputError(f"unknown bedrock kind {kind!r}")


def potential_for(spec) -> Potential:
    return {
        "none": None,
        "linear": linear_potential(spec.g),
        "confining": confining_potential(),
    }[spec.potential_kind]


def make_energy(spec, mesh: Mesh) -> EnergyModel:
    """Energy model described by an EnergySpec."""
    potential = potential_for(spec)
    if spec.kind == "fokker_planck":
        return FokkerPlanckEnergy(mesh, potential)
    if spec.kind == "porous_medium":
        return PorousMediumEnergy(mesh, spec.m, potential)
    bedrock = bedrock_profile(spec.bedrock, spec.bedrock_height, spec.bedrock_center, spec.bedrock_width)
    return SalinityEnergy(mesh, spec.nu, bedrock)
