# app/exporters/markdown.py
from pathlib import Path
from typing import Optional, Sequence

from app.exporters.csv_export import PathLike, write_atomic
from app.schemas.results import ConvergenceRow


def _number(value: Optional[float], fmt: str) -> str:
    return "" if value is None else format(value, fmt)


def to_markdown(tables: dict, title: str = "Time-space convergence") -> str:
    """Convert per-scheme convergence rows to Markdown tables."""
    md = f"# {title}\n\n"

    for scheme, rows in tables.items():
        md += f"## {scheme}\n\n"
        md += "| h | dt | err_linf | rate_linf | err_l1 | rate_l1 |\n"
        md += "|---|---|---|---|---|---|\n"
        for row in rows:
            md += (
                f"| {row.h:.4g} | {row.dt:.4g} | {row.err_linf:.4e} | {_number(row.rate_linf, '.4f')} "
                f"| {row.err_l1:.4e} | {_number(row.rate_l1, '.4f')} |\n"
            )
        md += "\n"

    return md


def last_rates(rows: Sequence[ConvergenceRow]) -> str:
    """One-line rate summary of the finest level."""
    row = rows[-1]
    return f"rate_linf={_number(row.rate_linf, '.3f')} rate_l1={_number(row.rate_l1, '.3f')}"


def export_markdown(tables: dict, path: PathLike) -> Path:
    return write_atomic(path, lambda f: f.write(to_markdown(tables)))
