"""HTTP service exposing the experiment operations.

Run with ``cubature-shaping serve`` or any ASGI server pointed at
``cubature_shaping.service:app``.  Each endpoint accepts the same request
model the CLI builds and returns a :class:`RunResponse`.
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse

from . import __version__, runner
from .errors import ShapingError
from .schemas import (
    CompareRequest,
    ErrorInfo,
    EvaluateRequest,
    ExportQamRequest,
    GridSearchRequest,
    RunResponse,
    TrainRequest,
)

app = FastAPI(title="cubature-shaping", version=__version__)

# exit code -> HTTP status
_STATUS = {1: 422, 2: 500, 3: 400}


@app.exception_handler(ShapingError)
async def _shaping_error(request: Request, exc: ShapingError):
    info = runner.error_info(exc)
    return JSONResponse(status_code=_STATUS.get(info.exit_code, 500), content=info.model_dump())


@app.exception_handler(RequestValidationError)
async def _validation_error(request: Request, exc: RequestValidationError):
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err.get("loc", ()) if p != "body")
        lines.append(f"{loc}: {err.get('msg')}")
    info = ErrorInfo(error_type="ConfigError", message="; ".join(lines), exit_code=1)
    return JSONResponse(status_code=422, content=info.model_dump())


@app.get("/health")
def health() -> dict:
    return {"status": "ok", "version": __version__}


@app.post("/train", response_model=RunResponse)
def train(req: TrainRequest) -> RunResponse:
    return runner.run_train(req)


@app.post("/evaluate", response_model=RunResponse)
def evaluate(req: EvaluateRequest) -> RunResponse:
    return runner.run_evaluate(req)


@app.post("/grid-search", response_model=RunResponse)
def grid_search(req: GridSearchRequest) -> RunResponse:
    return runner.run_grid_search(req)


@app.post("/compare", response_model=RunResponse)
def compare(req: CompareRequest) -> RunResponse:
    return runner.run_compare(req)


@app.post("/export-qam", response_model=RunResponse)
def export_qam(req: ExportQamRequest) -> RunResponse:
    return runner.run_export_qam(req)
