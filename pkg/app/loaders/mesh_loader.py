# app/loaders/mesh_loader.py
import logging
import os
import tempfile
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from app.errors import InvalidInputError
from app.services.mesh import Mesh, build_triangulation, refine_midpoint

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def _payload_lines(path: PathLike):
    with open(path, "r", encoding="utf-8") as f:
        for number, line in enumerate(f, start=1):
            line = line.strip()
            if line and not line.startswith("#"):
                yield number, line


def _header(entry, keyword: str, path: PathLike) -> int:
    if entry is None:
        raise InvalidInputError(f"{path}: missing '{keyword} <count>' header")
    number, line = entry
    parts = line.split()
    if len(parts) != 2 or parts[0] != keyword or not parts[1].isdigit():
        raise InvalidInputError(f"{path}:{number}: expected '{keyword} <count>', got {line!r}")
    return int(parts[1])


def _rows(lines, count: int, width: int, cast, path: PathLike) -> list:
    rows = []
    for _ in range(count):
        entry = next(lines, None)
        if entry is None:
            raise InvalidInputError(f"{path}: expected {count} rows, file ended after {len(rows)}")
        number, line = entry
        parts = line.split()
        try:
            if len(parts) != width:
                raise ValueError(line)
            rows.append([cast(v) for v in parts])
        except ValueError:
            raise InvalidInputError(f"{path}:{number}: expected {width} values, got {line!r}") from None
    return rows


def read_triangulation(path: PathLike) -> Tuple[np.ndarray, np.ndarray]:
    """Read ``nodes N`` / ``triangles M`` text blocks."""
    if not os.path.exists(path):
        raise InvalidInputError(f"mesh file not found: {path}")
    lines = _payload_lines(path)
    n_nodes = _header(next(lines, None), "nodes", path)
    nodes = _rows(lines, n_nodes, 2, float, path)
    n_triangles = _header(next(lines, None), "triangles", path)
    triangles = _rows(lines, n_triangles, 3, int, path)
    trailing = next(lines, None)
    if trailing is not None:
        raise InvalidInputError(f"{path}:{trailing[0]}: unexpected trailing content")
    logger.debug("Read %d nodes and %d triangles from %s", n_nodes, n_triangles, path)
    return np.asarray(nodes, dtype=float).reshape(-1, 2), np.asarray(triangles, dtype=np.int64).reshape(-1, 3)


def write_triangulation(nodes: np.ndarray, triangles: np.ndarray, path: PathLike) -> None:
    """Write the text format atomically."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(f"nodes {len(nodes)}\n")
            for x, y in nodes:
                f.write(f"{float(x)!r} {float(y)!r}\n")
            f.write(f"triangles {len(triangles)}\n")
            for i, j, k in triangles:
                f.write(f"{int(i)} {int(j)} {int(k)}\n")
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def load_mesh(path: PathLike, level: int = 0) -> Mesh:
    """Mesh from a triangulation file, refined ``level`` times."""
    if level < 0:
        raise InvalidInputError(f"refinement level must be >= 0, got {level}")
    nodes, triangles = read_triangulation(path)
    for _ in range(level):
        nodes, triangles = refine_midpoint(nodes, triangles)
    return build_triangulation(nodes, triangles)
