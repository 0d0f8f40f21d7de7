from __future__ import annotations

from typing import Sequence


class CphmError(Exception):
    """Base error for the geodesic distance pipeline."""


class ConfigurationError(CphmError):
    """Raised when parameters or run configuration are invalid."""


class GeometryError(CphmError):
    """Raised when a geometric query cannot be answered."""


class AmbiguousClosestPointError(GeometryError):
    """Raised when a query point has more than one closest surface point."""

    def __init__(self, point: Sequence[float], detail: str = "") -> None:
        self.point = tuple(float(c) for c in point)
        coords = ", ".join(f"{c:.12g}" for c in self.point)
        message = f"Closest point is not unique at ({coords})."
        if detail:
            message = f"{message} {detail}"
        super().__init__(message)


class NotOnBoundaryError(GeometryError):
    """Raised when a boundary frame is requested away from the surface boundary."""


class UnsupportedOracleError(GeometryError):
    """Raised when no exact geodesic oracle exists for a surface kind."""


class MeshFormatError(GeometryError):
    """Raised when a mesh file cannot be used as a triangulated surface."""


class BandClosureError(CphmError):
    """Raised when a stencil reaches outside the computational band."""


class SourceConfigurationError(CphmError):
    """Raised when source points are off the surface or too close together."""


class PatchFitError(CphmError):
    """Raised when the local quadratic reconstruction is rank deficient."""


class SolverError(CphmError):
    """Raised when a sparse solve fails or misses its residual target."""

    def __init__(
        self,
        message: str,
        *,
        residual: float | None = None,
        n: int | None = None,
        nnz: int | None = None,
    ) -> None:
        self.residual = residual
        self.n = n
        self.nnz = nnz
        parts = [message]
        if n is not None:
            parts.append(f"N={n}")
        if nnz is not None:
            parts.append(f"nnz={nnz}")
        if residual is not None:
            parts.append(f"residual={residual:.3e}")
        super().__init__(" ".join(parts))


class ToleranceError(CphmError):
    """Raised when a benchmark result falls outside its reference tolerance."""


class PipelineStageError(CphmError):
    """Wraps an error raised inside one pipeline stage."""

    def __init__(self, stage: str, cause: BaseException) -> None:
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")


class GeodesicFallbackWarning(UserWarning):
    """Emitted when patch shooting falls back to the lifted straight segment."""
