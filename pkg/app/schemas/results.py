# app/schemas/results.py
from typing import Optional

from pydantic import BaseModel, Field


class MeshQualityReport(BaseModel):
    """Regularity constants of an admissible mesh."""
    zeta_1: float = Field(ge=1.0)
    zeta_2: float = Field(ge=0.0)
    zeta_3: float = Field(ge=0.0)
    h_T: float = Field(gt=0.0)
    orthogonality_max_angle: float = Field(ge=0.0)


class ConvergenceRow(BaseModel):
    """One refinement level of a convergence study."""
    h: float
    dt: float
    err_linf: float = Field(ge=0.0)
    rate_linf: Optional[float] = None
    err_l1: float = Field(ge=0.0)
    rate_l1: Optional[float] = None
