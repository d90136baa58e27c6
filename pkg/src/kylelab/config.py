"""Versioned scenario configuration loaded from YAML or JSON."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Annotated, List, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator

from kylelab.core import MarketParams, make_grid
from kylelab.dist import Lognormal, LognormalMixture, Normal
from kylelab.equil import Scenario
from kylelab.vol import CIRClamped, Deterministic, LogDiffusion, RoughCIRClamped

SCHEMA_VERSION = 1


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class MarketConfig(_Strict):
    T: float = Field(1.0, gt=0)
    rho: float = Field(0.0, gt=-1.0, lt=1.0)


class NormalConfig(_Strict):
    kind: Literal["normal"]
    mean: float = 0.0
    std: float = Field(1.0, gt=0)


class LognormalConfig(_Strict):
    kind: Literal["lognormal"]
    m: float = Field(1.0, gt=0)
    sigma: float = Field(..., gt=0)


class MixtureConfig(_Strict):
    kind: Literal["mixture"]
    m: List[float]
    sigma: List[float]
    weights: List[float]


DistConfig = Annotated[Union[NormalConfig, LognormalConfig, MixtureConfig], Field(discriminator="kind")]


class DeterministicConfig(_Strict):
    kind: Literal["deterministic"]
    levels: List[float] = [1.0]
    breaks: List[float] = []


class LogDiffusionConfig(_Strict):
    kind: Literal["log_diffusion"]
    sigma0: float = Field(1.0, gt=0)
    b: float = 0.0
    psi: float = 0.0


class CIRConfig(_Strict):
    kind: Literal["cir"]
    a: float
    k: float
    eta: float
    x0: float
    sigma_low: float
    sigma_high: float


class RoughCIRConfig(_Strict):
    kind: Literal["rough_cir"]
    H: float
    b0: float
    b1: float
    A1: float
    V_bar: float
    V0: float
    sigma_low: float
    sigma_high: float


VolConfig = Annotated[Union[DeterministicConfig, LogDiffusionConfig, CIRConfig, RoughCIRConfig],
                      Field(discriminator="kind")]


class GridConfig(_Strict):
    n: int = Field(200, ge=2)
    refinement: Literal["uniform", "geometric"] = "geometric"
    factor: float = Field(0.5, gt=0, lt=1)


class McConfig(_Strict):
    n_paths: int = Field(1000, ge=2)
    seed: int = Field(0, ge=0)
    batch_size: int = Field(1000, ge=1)
    threads: int = Field(1, ge=1)
    n_buckets: int = Field(4, ge=1)
    conditional: bool = True


class SolverConfig(_Strict):
    backend: Literal["auto", "closed-form", "markov-pde", "picard-lsmc"] = "auto"
    n_r: Optional[int] = Field(None, ge=8)
    substeps: Optional[int] = Field(None, ge=1)
    r_max: Optional[float] = Field(None, gt=0)
    n_paths: Optional[int] = Field(None, ge=10)
    seed: Optional[int] = Field(None, ge=0)
    degree: Optional[int] = Field(None, ge=1)
    tol: Optional[float] = Field(None, gt=0)
    n_iter: Optional[int] = Field(None, ge=1)
    growth: Optional[int] = Field(None, ge=2)
    quad_order: int = Field(64, ge=16)

    def options(self):
        skip = {"backend", "quad_order"}
        return {k: v for k, v in self.model_dump().items() if k not in skip and v is not None}


class OutputConfig(_Strict):
    directory: str = "out"
    per_path_csv: bool = False
    per_path_rows: int = Field(10, ge=0)


class IVConfig(_Strict):
    xi: List[float] = [0.0]
    Sigma: List[float] = [0.25, 0.5, 0.75]
    strikes: Optional[List[float]] = None
    n_strikes: int = Field(41, ge=3)
    order: int = Field(64, ge=16)

    @field_validator("Sigma")
    @classmethod
    def _sigma_range(cls, v):
        if not v or any(not (0.0 < s <= 1.0) for s in v):
            raise ValueError("Sigma values must lie in (0, 1]")
        return v


class DiagnosticsConfig(_Strict):
    mgf_probes: List[List[float]] = [[0.5, 0.5], [1.0, 1.0], [1.0, -2.0]]
    holder_gamma0: float = Field(0.45, gt=0, lt=1)
    holder_gamma: float = Field(0.3, gt=0, lt=1)
    holder_M: float = Field(1.0, gt=0)


class ScenarioConfig(_Strict):
    version: Literal[1] = SCHEMA_VERSION
    market: MarketConfig = MarketConfig()
    dist: DistConfig
    vol: VolConfig
    grid: GridConfig = GridConfig()
    mc: McConfig = McConfig()
    solver: SolverConfig = SolverConfig()
    outputs: OutputConfig = OutputConfig()
    iv: IVConfig = IVConfig()
    diagnostics: DiagnosticsConfig = DiagnosticsConfig()

    # builders ------------------------------------------------------------------------
    def build_market(self) -> MarketParams:
        return MarketParams(self.market.T, self.market.rho)

    def build_dist(self):
        d = self.dist
        if isinstance(d, NormalConfig):
            return Normal(d.mean, d.std)
        if isinstance(d, LognormalConfig):
            return Lognormal(d.m, d.sigma)
        return LognormalMixture(tuple(d.m), tuple(d.sigma), tuple(d.weights))

    def build_vol(self):
        v = self.vol
        if isinstance(v, DeterministicConfig):
            return Deterministic(tuple(v.levels), tuple(v.breaks))
        if isinstance(v, LogDiffusionConfig):
            return LogDiffusion(v.sigma0, v.b, v.psi)
        if isinstance(v, CIRConfig):
            return CIRClamped(v.a, v.k, v.eta, v.x0, v.sigma_low, v.sigma_high)
        return RoughCIRClamped(v.H, v.b0, v.b1, v.A1, v.V_bar, v.V0, v.sigma_low, v.sigma_high)

    def build_scenario(self) -> Scenario:
        market = self.build_market()
        grid = make_grid(self.grid.n, market.T, self.grid.refinement, self.grid.factor)
        return Scenario(market, self.build_dist(), self.build_vol(), grid, self.solver.backend,
                        self.solver.options(), self.solver.quad_order)

    def validate_models(self):
        """Build every model once so that module-level invariants are enforced at load."""
        self.build_scenario()
        return self


def load_config(path) -> ScenarioConfig:
    """Parse a YAML or JSON file; unknown keys and invalid values raise."""
    path = Path(path)
    text = path.read_text()
    data = json.loads(text) if path.suffix.lower() == ".json" else yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: top level must be a mapping")
    return ScenarioConfig.model_validate(data).validate_models()
