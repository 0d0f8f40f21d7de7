from __future__ import annotations

from enum import Enum
import math
from pathlib import Path
from typing import Any, Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from app.errors import ConfigurationError
from app.geometry import Surface, make_surface
from app.linalg import SolverConfig
from app.solver import CphmConfig
from app.source import SourceSpec

AUTO_DX_DIVISOR = 128


class SurfaceKindName(str, Enum):
    sphere = "sphere"
    hemisphere = "hemisphere"
    disk2d = "disk2d"
    torus = "torus"
    triangle_mesh = "triangle_mesh"


class OutputFormat(str, Enum):
    csv = "csv"
    vtk = "vtk"
    summary = "summary"


class SurfaceBlock(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: SurfaceKindName = SurfaceKindName.sphere
    center: list[float] | None = None
    radius: float = Field(default=1.0, gt=0)
    R: float = Field(default=1.0, gt=0)
    r: float = Field(default=0.4, gt=0)
    path: Path | None = None
    rescale: bool = False
    smooth_normals: bool = False

    @model_validator(mode="after")
    def _check_mesh_path(self) -> SurfaceBlock:
        if self.kind is SurfaceKindName.triangle_mesh:
            if self.path is None:
                raise ValueError("surface.path is required for triangle_mesh surfaces")
            if not self.path.is_file():
                raise ValueError(f"mesh file `{self.path}` does not exist")
        return self

    def build(self) -> Surface:
        kind = self.kind.value
        if kind == "triangle_mesh":
            return make_surface(kind, path=self.path, rescale=self.rescale, smooth_normals=self.smooth_normals)
        params: dict[str, Any] = {}
        if self.center is not None:
            params["center"] = self.center
        if kind == "torus":
            params.update(R=self.R, r=self.r)
        else:
            params["radius"] = self.radius
        return make_surface(kind, **params)


class SolverBlock(BaseModel):
    model_config = ConfigDict(extra="forbid")

    method: Literal["sparse_direct", "iterative_krylov"] | None = None
    rel_tol: float | None = Field(default=None, gt=0)
    max_iter: int | None = Field(default=None, ge=1)

    def to_config(self) -> SolverConfig:
        return SolverConfig(**self.model_dump(exclude_none=True))


class NumericsBlock(BaseModel):
    """Unset fields fall through to the CphmConfig defaults."""

    model_config = ConfigDict(extra="forbid")

    dx: float | Literal["auto"]
    dt: float | None = Field(default=None, gt=0)
    gamma: float | None = Field(default=None, gt=0)
    p: int | None = None
    q: int | None = None
    H: float | None = Field(default=None, gt=0)
    kappa: Literal[1, 2] | None = None
    grad_eps: float | None = Field(default=None, gt=0)
    extend_X: bool | None = None
    renormalize_delta: bool | None = None
    solver: SolverBlock = Field(default_factory=SolverBlock)

    @field_validator("dx")
    @classmethod
    def _positive_dx(cls, value: float | str) -> float | str:
        if value != "auto" and not (isinstance(value, (int, float)) and value > 0):
            raise ValueError("dx must be positive or `auto`")
        return value

    def resolve_dx(self, surface: Surface) -> float:
        if self.dx == "auto":
            return surface.scale / AUTO_DX_DIVISOR
        return float(self.dx)

    def to_config(self, surface: Surface, dx: float | None = None) -> CphmConfig:
        values = self.model_dump(exclude_none=True, exclude={"dx", "solver"})
        return CphmConfig(
            dx=dx if dx is not None else self.resolve_dx(surface),
            solver=self.solver.to_config(),
            **values,
        )


class OutputsBlock(BaseModel):
    model_config = ConfigDict(extra="forbid")

    prefix: str = "cphm_run"
    formats: list[OutputFormat] = Field(default_factory=lambda: [OutputFormat.csv, OutputFormat.vtk, OutputFormat.summary])
    save_field: Path | None = None
    dump_operators: Path | None = None


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    surface: SurfaceBlock = Field(default_factory=SurfaceBlock)
    sources: list[str | list[float]] = Field(min_length=1)
    numerics: NumericsBlock
    outputs: OutputsBlock = Field(default_factory=OutputsBlock)

    def source_points(self) -> list[list[float]]:
        """Source coordinates; `sph:azimuth,colatitude` entries map onto the configured sphere."""
        points = []
        for entry in self.sources:
            if isinstance(entry, list):
                points.append([float(v) for v in entry])
                continue
            text = entry.strip()
            if text.startswith("sph:"):
                points.append(self._spherical(text[4:]))
            else:
                try:
                    points.append([float(v) for v in text.split(",")])
                except ValueError as exc:
                    raise ConfigurationError(f"Cannot parse source `{entry}`.") from exc
        for point in points:
            if len(point) not in (2, 3):
                raise ConfigurationError(f"Source {point} must have 2 or 3 coordinates.")
        return points

    def _spherical(self, text: str) -> list[float]:
        if self.surface.kind not in (SurfaceKindName.sphere, SurfaceKindName.hemisphere):
            raise ConfigurationError("Spherical source notation needs a sphere or hemisphere surface.")
        try:
            azimuth, colatitude = (float(v) for v in text.split(","))
        except ValueError as exc:
            raise ConfigurationError(f"Cannot parse spherical source `sph:{text}`.") from exc
        c = self.surface.center or [0.0, 0.0, 0.0]
        r = self.surface.radius
        return [
            c[0] + r * math.sin(colatitude) * math.cos(azimuth),
            c[1] + r * math.sin(colatitude) * math.sin(azimuth),
            c[2] + r * math.cos(colatitude),
        ]

    def source_spec(self) -> SourceSpec:
        return SourceSpec(points=self.source_points(), H=self.numerics.H)


class HealthResponse(BaseModel):
    status: str = Field(default="ok")
    service: str = Field(default="cphmpy")


class VersionResponse(BaseModel):
    service: str = Field(default="")
    api_version: str = Field(default="")


class SolveRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    surface: SurfaceBlock = Field(default_factory=SurfaceBlock)
    sources: list[str | list[float]] = Field(min_length=1)
    numerics: NumericsBlock
    include_samples: bool = False

    def to_run_config(self) -> RunConfig:
        return RunConfig(surface=self.surface, sources=self.sources, numerics=self.numerics)


class SolveResponse(BaseModel):
    report: dict[str, Any]
    samples: list[list[float]] | None = None
