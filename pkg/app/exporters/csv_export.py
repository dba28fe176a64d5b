# app/exporters/csv_export.py
import logging
import os
import tempfile
from pathlib import Path
from typing import Callable, Sequence, TextIO, Union

import numpy as np
import pandas as pd

from app.config import CSV_FLOAT_FORMAT
from app.schemas.results import ConvergenceRow
from app.services.ljko_solver import Trajectory
from app.services.mesh import Mesh

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

CONVERGENCE_COLUMNS = ["h", "dt", "err_linf", "rate_linf", "err_l1", "rate_l1"]


def write_atomic(path: PathLike, write: Callable[[TextIO], None]) -> Path:
    """Write through a temporary file next to ``path`` and rename it into place."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            write(f)
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise
    return target


def write_frame(frame: pd.DataFrame, path: PathLike) -> Path:
    target = write_atomic(
        path,
        lambda f: frame.to_csv(f, index=False, float_format=CSV_FLOAT_FORMAT, na_rep="", lineterminator="\n"),
    )
    logger.info("Wrote %s (%d rows)", target, len(frame))
    return target


def export_trajectory(trajectory: Trajectory, path: PathLike) -> Path:
    return write_frame(trajectory.to_frame(), path)


def final_state_frame(mesh: Mesh, rho: np.ndarray) -> pd.DataFrame:
    rho = np.asarray(rho, dtype=float).reshape(mesh.n_cells, -1)
    frame = pd.DataFrame({
        "cell_id": np.arange(mesh.n_cells),
        "x": mesh.cell_centers[:, 0],
        "y": mesh.cell_centers[:, 1],
    })
    for s in range(rho.shape[1]):
        frame["rho" if s == 0 else f"rho{s + 1}"] = rho[:, s]
    return frame


def export_final_state(mesh: Mesh, rho: np.ndarray, path: PathLike) -> Path:
    return write_frame(final_state_frame(mesh, rho), path)


def convergence_frame(rows: Sequence[ConvergenceRow]) -> pd.DataFrame:
    return pd.DataFrame([row.model_dump() for row in rows], columns=CONVERGENCE_COLUMNS)


def export_convergence(rows: Sequence[ConvergenceRow], path: PathLike) -> Path:
    return write_frame(convergence_frame(rows), path)


def side_by_side_frame(euler: Sequence[ConvergenceRow], ljko: Sequence[ConvergenceRow]) -> pd.DataFrame:
    """Both schemes on shared (h, dt) rows."""
    left = convergence_frame(euler)
    right = convergence_frame(ljko)
    frame = left[["h", "dt"]].copy()
    for prefix, part in (("euler", left), ("ljko", right)):
        for column in CONVERGENCE_COLUMNS[2:]:
            frame[f"{prefix}_{column}"] = part[column].to_numpy()
    return frame


def export_side_by_side(euler: Sequence[ConvergenceRow], ljko: Sequence[ConvergenceRow], path: PathLike) -> Path:
    return write_frame(side_by_side_frame(euler, ljko), path)


def export_series(series: pd.DataFrame, path: PathLike) -> Path:
    return write_frame(series[["t", "dissipation"]], path)
