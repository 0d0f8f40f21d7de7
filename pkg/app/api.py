from __future__ import annotations

import logging

from fastapi import FastAPI, HTTPException, status

from app.errors import (
    CphmError,
    ConfigurationError,
    GeometryError,
    PipelineStageError,
    SourceConfigurationError,
)
from app.export import FieldArchive
from app.schemas import HealthResponse, RunConfig, SolveRequest, SolveResponse, VersionResponse
from app.solver import cphm_run

logger = logging.getLogger(__name__)

_SERVICE = "cphmpy"


app = FastAPI(
    title="cphmpy Service",
    version="0.1.0",
    description="Geodesic distance fields on surfaces by the closest point heat method.",
)


def run_from_config(run: RunConfig) -> FieldArchive:
    surface = run.surface.build()
    result = cphm_run(surface, run.source_spec(), run.numerics.to_config(surface))
    return FieldArchive.from_field(result)


def _is_client_error(exc: CphmError) -> bool:
    cause = exc.cause if isinstance(exc, PipelineStageError) else exc
    return isinstance(cause, (ConfigurationError, SourceConfigurationError, GeometryError))


@app.get("/health", response_model=HealthResponse, tags=["system"])
def health() -> HealthResponse:
    return HealthResponse()


@app.get("/version", response_model=VersionResponse, tags=["system"])
def version() -> VersionResponse:
    return VersionResponse(service=_SERVICE, api_version=app.version)


@app.post(
    "/solve",
    response_model=SolveResponse,
    tags=["geodesics"],
    responses={
        422: {"description": "Invalid surface, source or numerics configuration."},
        500: {"description": "Linear solve or reconstruction failure."},
    },
)
def solve(payload: SolveRequest) -> SolveResponse:
    try:
        archive = run_from_config(payload.to_run_config())
    except CphmError as exc:
        if _is_client_error(exc):
            raise HTTPException(status_code=status.HTTP_422_UNPROCESSABLE_ENTITY, detail=str(exc)) from exc
        logger.exception("Solve request failed")
        raise HTTPException(status_code=status.HTTP_500_INTERNAL_SERVER_ERROR, detail=str(exc)) from exc

    samples = None
    if payload.include_samples:
        samples = [[*map(float, x), float(v)] for x, v in zip(archive.points, archive.phi)]
    return SolveResponse(report=archive.report, samples=samples)
