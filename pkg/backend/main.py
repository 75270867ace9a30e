"""
Archer report service
HTTP access to experiment runs, stored reports, matchmaking and overlay demos
"""

from contextlib import asynccontextmanager
from typing import Any, Dict, List, Optional
import logging
import os

from fastapi import FastAPI, HTTPException, Query, Request
from fastapi.concurrency import run_in_threadpool
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field
import uvicorn

from settings import log_level

logging.basicConfig(level=log_level("INFO"))
logger = logging.getLogger(__name__)

from database import ReportStore
from errors import ArcherError
from harness import list_profiles, overlay_demo, run_experiment
from matchmaker import Ad, AdKind, check_match

ERROR_STATUS = {"config": 400, "invalid-config": 400, "ad": 400, "syntax": 400, "report": 404}


class RunRequest(BaseModel):
    seed: Optional[int] = Field(None, description="Overrides the profile's overlay seed")


class MatchRequest(BaseModel):
    job: Dict[str, Any] = Field(..., description="Job ad attributes; expressions carry an 'expr:' prefix")
    resource: Dict[str, Any] = Field(..., description="Resource ad attributes")


store = ReportStore()


@asynccontextmanager
async def lifespan(app: FastAPI):
    await store.initialize()
    logger.info(f"Archer report service started; reports under {store.root}")
    yield


app = FastAPI(
    title="Archer grid simulator",
    description="Runs community-grid experiments and serves their reports",
    version="1.0.0",
    lifespan=lifespan,
)

allowed_origins = os.getenv("ALLOWED_ORIGINS", "*")
origins = ["*"] if allowed_origins == "*" else allowed_origins.split(",")

app.add_middleware(
    CORSMiddleware,
    allow_origins=origins,
    allow_methods=["*"],
    allow_headers=["*"],
)


@app.exception_handler(ArcherError)
async def archer_exception_handler(request: Request, exc: ArcherError):
    return JSONResponse(
        status_code=ERROR_STATUS.get(exc.category, 500),
        content={"success": False, "category": exc.category, "message": str(exc)},
    )


@app.exception_handler(RequestValidationError)
async def validation_exception_handler(request: Request, exc: RequestValidationError):
    """Flatten pydantic errors into one readable message"""
    errors = []
    for error in exc.errors():
        field_path = ".".join(str(p) for p in error["loc"] if p != "body")
        errors.append(f"{field_path or 'body'}: {error.get('msg', 'invalid')}")
    return JSONResponse(
        status_code=422,
        content={"success": False, "category": "validation", "message": "; ".join(errors)},
    )


@app.get("/api/health")
async def health():
    return {"status": "ok", "reports": str(store.root)}


@app.get("/api/profiles")
async def get_profiles() -> List[str]:
    return list_profiles()


@app.post("/api/experiments/{name}/run")
async def run_profile(name: str, request: RunRequest):
    """Run a built-in profile and store its report"""
    if name not in list_profiles():
        raise HTTPException(status_code=404, detail=f"unknown profile '{name}'")
    report = await run_in_threadpool(run_experiment, name, request.seed)
    await store.save(report)
    return {"success": True, "name": report.name, "seed": report.seed, "summary": report.summary()}


@app.get("/api/reports")
async def get_reports():
    return await store.list_reports()


@app.get("/api/reports/{name}")
async def get_report(name: str):
    summary = await store.load_summary(name)
    if summary is None:
        raise HTTPException(status_code=404, detail=f"no report named '{name}'")
    return summary


@app.post("/api/match")
async def match(request: MatchRequest):
    job = Ad.from_json(request.job, AdKind.JOB)
    resource = Ad.from_json(request.resource, AdKind.RESOURCE)
    return check_match(job, resource)


@app.get("/api/overlay/demo")
async def demo_overlay(
    nodes: int = Query(16, ge=1, le=1024),
    seed: int = 0,
    pairs: int = Query(50, ge=0, le=10000),
    bits: int = Query(32, ge=4, le=160),
):
    return await run_in_threadpool(overlay_demo, nodes, seed, pairs, bits)


if __name__ == "__main__":
    uvicorn.run(
        "main:app",
        host=os.getenv("HOST", "0.0.0.0"),
        port=int(os.getenv("PORT", "8000")),
        reload=os.getenv("RELOAD", "false").lower() == "true",
        log_level=log_level("INFO").lower(),
    )
