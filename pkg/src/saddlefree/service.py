"""HTTP facade over the experiment runner.

The service accepts the same validated config documents the CLI reads from
TOML files, runs the experiment server-side, and returns the artifact
manifest plus summary.  One endpoint per experiment verb keeps the routes
self-describing; a config whose ``kind`` does not match the route is
rejected as a validation error.

Status mapping: configuration problems are 422, runtime failures 500 —
the CLI translates these to its exit codes.
"""

from __future__ import annotations

from typing import List, Optional

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, ConfigDict, Field

from .config import ConfigError, ExperimentConfig
from .experiments import ExperimentError, run_experiment, run_search

SERVICE_NAME = "saddlefree"


class ExperimentRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    config: ExperimentConfig
    out: Optional[str] = None
    jobs: Optional[int] = Field(default=None, ge=1)


class ExperimentResponse(BaseModel):
    kind: str
    out_dir: str
    artifacts: List[str]
    summary: dict


class HealthResponse(BaseModel):
    status: str
    service: str


def _execute(request: ExperimentRequest, expected_kind: Optional[str],
             search: bool = False) -> ExperimentResponse:
    if expected_kind is not None and request.config.kind != expected_kind:
        raise HTTPException(
            status_code=422,
            detail=f"this endpoint runs {expected_kind!r} configs, "
                   f"got kind {request.config.kind!r}")
    try:
        runner = run_search if search else run_experiment
        report = runner(request.config, out=request.out, jobs=request.jobs)
    except ConfigError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc
    except ExperimentError as exc:
        raise HTTPException(status_code=500, detail=str(exc)) from exc
    return ExperimentResponse(kind=report.kind, out_dir=report.out_dir,
                              artifacts=report.artifacts,
                              summary=report.summary)


def create_app() -> FastAPI:
    app = FastAPI(title=SERVICE_NAME)

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", service=SERVICE_NAME)

    @app.post("/experiments/optimize", response_model=ExperimentResponse)
    def optimize(request: ExperimentRequest) -> ExperimentResponse:
        return _execute(request, "optimize")

    @app.post("/experiments/compare", response_model=ExperimentResponse)
    def compare(request: ExperimentRequest) -> ExperimentResponse:
        return _execute(request, "compare")

    @app.post("/experiments/critical-points",
              response_model=ExperimentResponse)
    def critical_points(request: ExperimentRequest) -> ExperimentResponse:
        return _execute(request, "critical_points")

    @app.post("/experiments/spectrum", response_model=ExperimentResponse)
    def spectrum(request: ExperimentRequest) -> ExperimentResponse:
        return _execute(request, "spectrum")

    @app.post("/experiments/search", response_model=ExperimentResponse)
    def search(request: ExperimentRequest) -> ExperimentResponse:
        return _execute(request, None, search=True)

    return app


app = create_app()
