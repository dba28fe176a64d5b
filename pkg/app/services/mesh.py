# app/services/mesh.py
"""Admissible two-point-flux meshes of rectangles and triangulated polygons."""
import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from app.config import AREA_TOL, DEGENERACY_TOL, ORTHOGONALITY_TOL
from app.errors import InvalidInputError, NonAdmissibleMeshError
from app.schemas.results import MeshQualityReport

logger = logging.getLogger(__name__)

Rectangle = Tuple[float, float, float, float]
UNIT_SQUARE: Rectangle = (0.0, 1.0, 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable cell and face geometry.

    Internal faces are oriented from ``face_cells[:, 0]`` (K) to
    ``face_cells[:, 1]`` (L). Boundary faces carry geometry only.
    """
    cell_measures: np.ndarray
    cell_centers: np.ndarray
    cell_vertices: np.ndarray
    face_cells: np.ndarray
    face_measures: np.ndarray
    face_distances: np.ndarray
    transmissivities: np.ndarray
    face_normals: np.ndarray
    face_centers: np.ndarray
    boundary_cells: np.ndarray
    boundary_measures: np.ndarray
    boundary_normals: np.ndarray
    boundary_centers: np.ndarray
    domain_area: float
    nodes: Optional[np.ndarray] = None
    triangles: Optional[np.ndarray] = None

    def __post_init__(self):
        for value in self.__dict__.values():
            if isinstance(value, np.ndarray):
                value.setflags(write=False)

    @property
    def n_cells(self) -> int:
        return self.cell_measures.shape[0]

    @property
    def n_faces(self) -> int:
        return self.face_cells.shape[0]

    @cached_property
    def cell_faces(self) -> Tuple[np.ndarray, ...]:
        """Internal face indices of every cell."""
        cells = self.face_cells.ravel()
        faces = np.repeat(np.arange(self.n_faces), 2)
        order = np.argsort(cells, kind="stable")
        bounds = np.searchsorted(cells[order], np.arange(self.n_cells + 1))
        return tuple(faces[order][bounds[k]:bounds[k + 1]] for k in range(self.n_cells))

    def _selector(self, side: int) -> sp.csr_matrix:
        return sp.csr_matrix(
            (np.ones(self.n_faces), (self.face_cells[:, side], np.arange(self.n_faces))),
            shape=(self.n_cells, self.n_faces),
        )

    @cached_property
    def owner_selector(self) -> sp.csr_matrix:
        """Cell-by-face 0/1 matrix picking K of every face."""
        return self._selector(0)

    @cached_property
    def neighbour_selector(self) -> sp.csr_matrix:
        """Cell-by-face 0/1 matrix picking L of every face."""
        return self._selector(1)

    @cached_property
    def incidence(self) -> sp.csr_matrix:
        """Cell-by-face signed incidence: +1 at K, -1 at L."""
        return (self.owner_selector - self.neighbour_selector).tocsr()

    @cached_property
    def cell_diameters(self) -> np.ndarray:
        verts = self.cell_vertices
        diff = verts[:, :, None, :] - verts[:, None, :, :]
        return np.sqrt((diff ** 2).sum(axis=-1)).max(axis=(1, 2))

    @property
    def h(self) -> float:
        """Mesh size h_T."""
        return float(self.cell_diameters.max())


def _check_rectangle(domain: Rectangle) -> Rectangle:
    if len(domain) != 4:
        raise InvalidInputError(f"rectangle must be (x0, x1, y0, y1), got {domain!r}")
    x0, x1, y0, y1 = (float(v) for v in domain)
    if not (np.isfinite([x0, x1, y0, y1]).all() and x1 > x0 and y1 > y0):
        raise InvalidInputError(f"degenerate rectangle {domain!r}")
    return x0, x1, y0, y1


def build_cartesian(nx: int, ny: int, domain: Rectangle = UNIT_SQUARE) -> Mesh:
    """Uniform nx-by-ny grid; cell K = j * nx + i."""
    if nx < 1 or ny < 1:
        raise InvalidInputError(f"grid needs nx, ny >= 1, got ({nx}, {ny})")
    x0, x1, y0, y1 = _check_rectangle(domain)
    hx, hy = (x1 - x0) / nx, (y1 - y0) / ny

    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny))
    ii, jj = ii.ravel(), jj.ravel()
    centers = np.column_stack([x0 + (ii + 0.5) * hx, y0 + (jj + 0.5) * hy])
    corners = np.array([[0, 0], [1, 0], [1, 1], [0, 1]])
    vertices = np.stack(
        [np.column_stack([x0 + (ii + cx) * hx, y0 + (jj + cy) * hy]) for cx, cy in corners],
        axis=1,
    )
    index = (jj * nx + ii).reshape(ny, nx)

    vk, vl = index[:, :-1].ravel(), index[:, 1:].ravel()
    hk, hl = index[:-1, :].ravel(), index[1:, :].ravel()
    face_cells = np.column_stack([np.concatenate([vk, hk]), np.concatenate([vl, hl])]).astype(np.int64)
    n_vertical, n_horizontal = vk.size, hk.size
    face_measures = np.concatenate([np.full(n_vertical, hy), np.full(n_horizontal, hx)])
    face_distances = np.concatenate([np.full(n_vertical, hx), np.full(n_horizontal, hy)])
    face_normals = np.concatenate([np.tile([1.0, 0.0], (n_vertical, 1)), np.tile([0.0, 1.0], (n_horizontal, 1))])
    face_normals = face_normals.reshape(-1, 2)
    face_centers = 0.5 * (centers[face_cells[:, 0]] + centers[face_cells[:, 1]])

    sides = [
        (index[:, 0], hy, (-1.0, 0.0), (-0.5 * hx, 0.0)),
        (index[:, -1], hy, (1.0, 0.0), (0.5 * hx, 0.0)),
        (index[0, :], hx, (0.0, -1.0), (0.0, -0.5 * hy)),
        (index[-1, :], hx, (0.0, 1.0), (0.0, 0.5 * hy)),
    ]
    boundary_cells = np.concatenate([cells for cells, _, _, _ in sides]).astype(np.int64)
    boundary_measures = np.concatenate([np.full(cells.size, m) for cells, m, _, _ in sides])
    boundary_normals = np.concatenate([np.tile(n, (cells.size, 1)) for cells, _, n, _ in sides])
    boundary_centers = np.concatenate([centers[cells] + np.asarray(off) for cells, _, _, off in sides])

    nodes_x, nodes_y = np.meshgrid(np.linspace(x0, x1, nx + 1), np.linspace(y0, y1, ny + 1))
    return Mesh(
        cell_measures=np.full(nx * ny, hx * hy),
        cell_centers=centers,
        cell_vertices=vertices,
        face_cells=face_cells,
        face_measures=face_measures,
        face_distances=face_distances,
        transmissivities=face_measures / face_distances,
        face_normals=face_normals,
        face_centers=face_centers,
        boundary_cells=boundary_cells,
        boundary_measures=boundary_measures,
        boundary_normals=boundary_normals,
        boundary_centers=boundary_centers,
        domain_area=(x1 - x0) * (y1 - y0),
        nodes=np.column_stack([nodes_x.ravel(), nodes_y.ravel()]),
    )


def _as_triangulation(nodes, triangles) -> Tuple[np.ndarray, np.ndarray]:
    nodes = np.array(nodes, dtype=float)
    triangles = np.array(triangles)
    if nodes.ndim != 2 or nodes.shape[1] != 2 or not np.isfinite(nodes).all():
        raise InvalidInputError("nodes must be a finite (N, 2) array")
    if triangles.ndim != 2 or triangles.shape[1] != 3 or triangles.shape[0] == 0:
        raise InvalidInputError("triangles must be a non-empty (M, 3) index array")
    if not np.issubdtype(triangles.dtype, np.integer):
        if not np.array_equal(triangles, np.round(triangles)):
            raise InvalidInputError("triangle indices must be integers")
    triangles = triangles.astype(np.int64)
    if triangles.min() < 0 or triangles.max() >= nodes.shape[0]:
        raise InvalidInputError("triangle index out of range")
    t = np.sort(triangles, axis=1)
    if ((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2])).any():
        raise InvalidInputError("triangle with repeated vertex")
    return nodes, triangles


def _edge_table(triangles: np.ndarray):
    """Directed edges of every triangle grouped by undirected edge."""
    directed = np.stack(
        [triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]], axis=1
    ).reshape(-1, 2)
    owner = np.repeat(np.arange(triangles.shape[0]), 3)
    keys, inverse, counts = np.unique(
        np.sort(directed, axis=1), axis=0, return_inverse=True, return_counts=True
    )
    inverse = inverse.ravel()
    if (counts > 2).any():
        raise InvalidInputError("non-conforming triangulation: edge shared by more than two triangles")
    order = np.argsort(inverse, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    first = order[starts]
    return keys, inverse, counts, directed, owner, order, starts, first


def _circumcenters(a: np.ndarray, b: np.ndarray, c: np.ndarray) -> np.ndarray:
    ab, ac = b - a, c - a
    d = 2.0 * (ab[:, 0] * ac[:, 1] - ab[:, 1] * ac[:, 0])
    ab2, ac2 = (ab ** 2).sum(axis=1), (ac ** 2).sum(axis=1)
    ux = (ac[:, 1] * ab2 - ab[:, 1] * ac2) / d
    uy = (ab[:, 0] * ac2 - ac[:, 0] * ab2) / d
    return a + np.column_stack([ux, uy])


def build_triangulation(nodes: Sequence, triangles: Sequence) -> Mesh:
    """Circumcenter mesh of a conforming triangulation."""
    nodes, triangles = _as_triangulation(nodes, triangles)
    a, b, c = (nodes[triangles[:, i]] for i in range(3))
    signed = 0.5 * ((b - a)[:, 0] * (c - a)[:, 1] - (b - a)[:, 1] * (c - a)[:, 0])
    scale = np.maximum.reduce([
        np.linalg.norm(b - a, axis=1), np.linalg.norm(c - b, axis=1), np.linalg.norm(a - c, axis=1)
    ])
    if (np.abs(signed) <= DEGENERACY_TOL * scale ** 2).any():
        raise InvalidInputError("degenerate triangle with zero area")
    flipped = signed < 0
    if flipped.any():
        logger.debug("Reoriented %d clockwise triangles", int(flipped.sum()))
        triangles = triangles.copy()
        triangles[flipped, 1], triangles[flipped, 2] = triangles[flipped, 2], triangles[flipped, 1].copy()
        a, b, c = (nodes[triangles[:, i]] for i in range(3))
    areas = np.abs(signed)
    centers = _circumcenters(a, b, c)

    _, _, counts, directed, owner, order, starts, first = _edge_table(triangles)
    internal = counts == 2
    k_occ = first[internal]
    l_occ = order[starts[internal] + 1]
    if (directed[k_occ] == directed[l_occ]).all(axis=1).any():
        raise InvalidInputError("non-conforming triangulation: overlapping triangles")

    face_cells = np.column_stack([owner[k_occ], owner[l_occ]]).astype(np.int64)
    p, q = nodes[directed[k_occ, 0]], nodes[directed[k_occ, 1]]
    edge = q - p
    face_measures = np.linalg.norm(edge, axis=1)
    face_normals = np.column_stack([edge[:, 1], -edge[:, 0]]) / face_measures[:, None]

    offset = centers[face_cells[:, 1]] - centers[face_cells[:, 0]]
    face_distances = np.linalg.norm(offset, axis=1)
    _check_admissible(offset, face_normals, face_distances, float(scale.max()))

    b_occ = first[~internal]
    bp, bq = nodes[directed[b_occ, 0]], nodes[directed[b_occ, 1]]
    bedge = bq - bp
    boundary_measures = np.linalg.norm(bedge, axis=1)

    return Mesh(
        cell_measures=areas,
        cell_centers=centers,
        cell_vertices=np.stack([a, b, c], axis=1),
        face_cells=face_cells,
        face_measures=face_measures,
        face_distances=face_distances,
        transmissivities=face_measures / face_distances,
        face_normals=face_normals,
        face_centers=0.5 * (p + q),
        boundary_cells=owner[b_occ].astype(np.int64),
        boundary_measures=boundary_measures,
        boundary_normals=np.column_stack([bedge[:, 1], -bedge[:, 0]]) / boundary_measures[:, None],
        boundary_centers=0.5 * (bp + bq),
        domain_area=float(areas.sum()),
        nodes=nodes,
        triangles=triangles,
    )


def _check_admissible(offset: np.ndarray, normals: np.ndarray, distances: np.ndarray, h: float) -> None:
    degenerate = distances <= DEGENERACY_TOL * h
    if degenerate.any():
        face = int(np.argmax(degenerate))
        raise NonAdmissibleMeshError(
            f"coincident cell centers across face {face} (d_sigma={distances[face]:.3e})"
        )
    normal_part = (offset * normals).sum(axis=1)
    tangent_part = offset[:, 0] * normals[:, 1] - offset[:, 1] * normals[:, 0]
    bad = (normal_part <= 0) | (np.abs(tangent_part) > ORTHOGONALITY_TOL * distances)
    if bad.any():
        face = int(np.argmax(bad))
        raise NonAdmissibleMeshError(f"cell centers not ordered along the normal of face {face}")


def refine_midpoint(nodes: Sequence, triangles: Sequence) -> Tuple[np.ndarray, np.ndarray]:
    """Split every triangle into four through its edge midpoints."""
    nodes, triangles = _as_triangulation(nodes, triangles)
    keys, inverse, *_ = _edge_table(triangles)
    midpoints = 0.5 * (nodes[keys[:, 0]] + nodes[keys[:, 1]])
    mid = (nodes.shape[0] + inverse).reshape(-1, 3)
    v0, v1, v2 = triangles[:, 0], triangles[:, 1], triangles[:, 2]
    m01, m12, m20 = mid[:, 0], mid[:, 1], mid[:, 2]
    children = np.stack([
        np.column_stack([v0, m01, m20]),
        np.column_stack([m01, v1, m12]),
        np.column_stack([m20, m12, v2]),
        np.column_stack([m01, m12, m20]),
    ], axis=1).reshape(-1, 3)
    return np.vstack([nodes, midpoints]), children


def staggered_triangulation(n: int, m: int, domain: Rectangle = UNIT_SQUARE) -> Tuple[np.ndarray, np.ndarray]:
    """Strictly acute triangulation of a rectangle with 4*n*m triangles.

    Even node columns sit on a regular lattice, odd columns are shifted by
    half a row with their end nodes pulled towards the boundary rows. Every
    triangle is acute, so midpoint refinements remain admissible.
    """
    x0, x1, y0, y1 = _check_rectangle(domain)
    if n < 1 or not n < m < 2 * n:
        raise InvalidInputError(f"staggered triangulation needs n < m < 2n, got n={n}, m={m}")
    p = (x1 - x0) / (2 * n)
    hy = (y1 - y0) / m
    s = hy - 0.25 * (hy - p)
    if p * p <= s * (hy - s) or p * p <= 0.5 * hy * (hy - s):
        raise InvalidInputError(f"staggered triangulation ({n}, {m}) would not be acute")

    nodes = []
    even, odd = [], []
    for col in range(2 * n + 1):
        x = x0 + col * p
        if col % 2 == 0:
            ys = y0 + hy * np.arange(m + 1)
            even.append(list(range(len(nodes), len(nodes) + m + 1)))
        else:
            ys = y0 + hy * (np.arange(m) + 0.5)
            ys[0], ys[-1] = y0 + s, y1 - s
            odd.append(list(range(len(nodes), len(nodes) + m)))
        nodes.extend((x, y) for y in ys)

    triangles = []
    for i in range(n):
        o = odd[i]
        for e in (even[i], even[i + 1]):
            triangles.extend((e[k], e[k + 1], o[k]) for k in range(m))
            triangles.extend((o[k], o[k + 1], e[k + 1]) for k in range(m - 1))
        triangles.append((even[i][0], even[i + 1][0], o[0]))
        triangles.append((even[i][m], even[i + 1][m], o[m - 1]))
    return np.asarray(nodes, dtype=float), np.asarray(triangles, dtype=np.int64)


def _distance_to_cells(points: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    """Distance from each point to its convex, counter-clockwise cell."""
    start = vertices
    end = np.roll(vertices, -1, axis=1)
    edge = end - start
    rel = points[:, None, :] - start
    cross = edge[..., 0] * rel[..., 1] - edge[..., 1] * rel[..., 0]
    inside = (cross >= 0).all(axis=1)
    t = np.clip((rel * edge).sum(axis=-1) / (edge ** 2).sum(axis=-1), 0.0, 1.0)
    nearest = start + t[..., None] * edge
    dist = np.linalg.norm(points[:, None, :] - nearest, axis=-1).min(axis=1)
    return np.where(inside, 0.0, dist)


def audit(mesh: Mesh) -> MeshQualityReport:
    """Smallest regularity constants of the mesh and worst orthogonality defect."""
    h_cell = mesh.cell_diameters
    zeta_1 = 1.0
    zeta_3 = 0.0
    angle = 0.0
    if mesh.n_faces:
        d = mesh.face_distances
        h_faces = h_cell[mesh.face_cells]
        zeta_1 = max(zeta_1, float((h_faces / d[:, None]).max()), float((d[:, None] / h_faces).max()))
        half_diamond = 0.5 * mesh.face_measures * d
        per_cell = np.bincount(mesh.face_cells[:, 0], half_diamond, mesh.n_cells)
        per_cell += np.bincount(mesh.face_cells[:, 1], half_diamond, mesh.n_cells)
        zeta_3 = float((per_cell / mesh.cell_measures).max())
        offset = mesh.cell_centers[mesh.face_cells[:, 1]] - mesh.cell_centers[mesh.face_cells[:, 0]]
        cos = (offset * mesh.face_normals).sum(axis=1)
        sin = np.abs(offset[:, 0] * mesh.face_normals[:, 1] - offset[:, 1] * mesh.face_normals[:, 0])
        angle = float(np.arctan2(sin, cos).max())
    zeta_2 = float((_distance_to_cells(mesh.cell_centers, mesh.cell_vertices) / h_cell).max())
    return MeshQualityReport(
        zeta_1=zeta_1, zeta_2=zeta_2, zeta_3=zeta_3, h_T=mesh.h, orthogonality_max_angle=angle
    )


def check_partition(mesh: Mesh, area: Optional[float] = None) -> None:
    """Raise if the cell measures do not add up to the domain area."""
    target = mesh.domain_area if area is None else area
    total = float(mesh.cell_measures.sum())
    if abs(total - target) > AREA_TOL * target:
        raise InvalidInputError(f"cell measures sum to {total!r}, domain area is {target!r}")
