# app/schemas/config.py
import os
from typing import Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.config import (
    DEFAULT_G,
    DEFAULT_OUTPUT_DIR,
    DENSITY_FLOOR_FACTOR,
    ITER_FAST_THRESHOLD,
    NEWTON_MAX_ITER,
    NEWTON_TOL,
    STAGNATION_WINDOW,
    TAU_DECREASE,
    TAU_INCREASE,
    TAU_MAX,
    TAU_MIN,
)

Rectangle = Tuple[float, float, float, float]


class NewtonConfig(BaseModel):
    """Newton tolerances and the time-step adaptation policy."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    tol_linf: float = Field(NEWTON_TOL, gt=0)
    max_iter: int = Field(NEWTON_MAX_ITER, ge=1)
    density_floor: Optional[float] = Field(None, gt=0)
    density_floor_factor: float = Field(DENSITY_FLOOR_FACTOR, gt=0)
    tau_increase: float = TAU_INCREASE
    tau_decrease: float = TAU_DECREASE
    iter_fast_threshold: int = Field(ITER_FAST_THRESHOLD, ge=0)
    tau_min: float = Field(TAU_MIN, gt=0)
    tau_max: float = Field(TAU_MAX, gt=0)
    adaptive: bool = True
    stagnation_window: int = Field(STAGNATION_WINDOW, ge=1)
    linear_solver: Literal["auto", "schur", "block"] = "auto"

    @model_validator(mode="after")
    def _check_policy(self):
        if not 0 < self.tau_decrease < 1 < self.tau_increase:
            raise ValueError("need 0 < tau_decrease < 1 < tau_increase")
        if self.tau_min > self.tau_max:
            raise ValueError("tau_min must not exceed tau_max")
        return self


class EnergySpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["fokker_planck", "porous_medium", "salinity"] = "fokker_planck"
    g: float = DEFAULT_G
    m: float = Field(2.0, gt=1)
    potential: Optional[Literal["none", "linear", "confining"]] = None
    nu: float = Field(0.9, gt=0, lt=1)
    bedrock: Literal["flat", "bump", "slope"] = "bump"
    bedrock_height: float = 0.3
    bedrock_center: float = 0.5
    bedrock_width: float = Field(0.15, gt=0)

    @property
    def potential_kind(self) -> str:
        if self.potential is not None:
            return self.potential
        return {"fokker_planck": "linear", "porous_medium": "confining"}.get(self.kind, "none")


class MeshSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["cartesian", "file", "refined", "staggered"] = "cartesian"
    nx: int = Field(8, ge=1)
    ny: int = Field(8, ge=1)
    n: int = Field(3, ge=1)
    m: int = Field(4, ge=2)
    path: Optional[str] = None
    level: int = Field(0, ge=0)
    domain: Rectangle = (0.0, 1.0, 0.0, 1.0)

    @model_validator(mode="after")
    def _check_source(self):
        if self.kind in ("file", "refined"):
            if not self.path:
                raise ValueError(f"mesh kind '{self.kind}' needs a path")
            if not os.path.exists(self.path):
                raise ValueError(f"mesh file not found: {self.path}")
        return self


class InitialSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["fp_exact", "equilibrium", "uniform", "blob", "barenblatt", "salinity"] = "fp_exact"
    mass: float = Field(1.0, gt=0)
    floor: float = Field(0.0, ge=0)
    center: Tuple[float, float] = (0.5, 0.5)
    radius: float = Field(0.1, gt=0)
    time: Optional[float] = Field(None, ge=0)


class ConvergenceSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    levels: int = Field(4, ge=2)
    refine: bool = True


class RunConfig(BaseModel):
    """Validated contents of a run configuration file."""
    model_config = ConfigDict(extra="forbid")

    scheme: Literal["ljko", "euler"] = "ljko"
    t0: float = Field(0.0, ge=0)
    t_end: float
    tau: float = Field(gt=0)
    adaptive: bool = True
    output_dir: str = DEFAULT_OUTPUT_DIR
    jobs: int = Field(1, ge=1)
    energy: EnergySpec = Field(default_factory=EnergySpec)
    mesh: MeshSpec = Field(default_factory=MeshSpec)
    initial: InitialSpec = Field(default_factory=InitialSpec)
    newton: NewtonConfig = Field(default_factory=NewtonConfig)
    convergence: ConvergenceSpec = Field(default_factory=ConvergenceSpec)

    @model_validator(mode="after")
    def _check_horizon(self):
        if self.t_end < self.t0:
            raise ValueError(f"t_end ({self.t_end}) precedes t0 ({self.t0})")
        if self.newton.adaptive != self.adaptive:
            self.newton = self.newton.model_copy(update={"adaptive": self.adaptive})
        return self
