"""FastAPI experiment service: submit runs, poll status, fetch artifacts."""

from __future__ import annotations

import os

from fastapi import FastAPI, HTTPException
from fastapi.responses import PlainTextResponse

from .. import __version__
from ..config import ConfigError
from .jobs import Job, JobStore, build_config
from .schemas import (HealthResponse, RunCreated, RunInfo, RunList, RunRequest,
                      ValidateRequest, ValidateResponse)


def _info(job: Job) -> RunInfo:
    return RunInfo(
        id=job.id, state=job.state, algo=job.cfg.run.algo, seed=job.cfg.run.seed,
        episodes=job.cfg.run.episodes, slots=job.cfg.run.slots,
        error_kind=job.error_kind, error_detail=job.error_detail,
    )


def create_app(workdir: str = "aerofed-runs") -> FastAPI:
    app = FastAPI(title="aerofed", version=__version__)
    store = JobStore(workdir)
    app.state.store = store

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse(status="ok", version=__version__)

    @app.post("/config/validate", response_model=ValidateResponse)
    def validate(req: ValidateRequest):
        try:
            build_config(req.config_text, req.overrides)
        except ConfigError as exc:
            return ValidateResponse(valid=False, error=str(exc))
        return ValidateResponse(valid=True)

    @app.post("/runs", response_model=RunCreated, status_code=201)
    def submit_run(req: RunRequest):
        try:
            cfg = build_config(req.config_text, req.overrides)
        except ConfigError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        job = store.submit(cfg)
        return RunCreated(id=job.id)

    @app.get("/runs", response_model=RunList)
    def list_runs():
        return RunList(runs=[_info(j) for j in store.all()])

    @app.get("/runs/{run_id}", response_model=RunInfo)
    def run_status(run_id: str):
        job = store.get(run_id)
        if job is None:
            raise HTTPException(status_code=404, detail=f"unknown run {run_id}")
        return _info(job)

    def _artifact(run_id: str, filename: str) -> str:
        job = store.get(run_id)
        if job is None:
            raise HTTPException(status_code=404, detail=f"unknown run {run_id}")
        if job.state != "succeeded":
            raise HTTPException(status_code=409,
                                detail=f"run {run_id} is {job.state}")
        path = store.artifact_path(run_id, filename)
        if not os.path.exists(path):
            raise HTTPException(status_code=404, detail=f"{filename} not found")
        with open(path, "r") as fh:
            return fh.read()

    @app.get("/runs/{run_id}/report", response_class=PlainTextResponse)
    def run_report(run_id: str):
        return _artifact(run_id, "report.txt")

    @app.get("/runs/{run_id}/metrics/slots", response_class=PlainTextResponse)
    def run_slots(run_id: str):
        return _artifact(run_id, "metrics_slots.csv")

    @app.get("/runs/{run_id}/metrics/episodes", response_class=PlainTextResponse)
    def run_episodes(run_id: str):
        return _artifact(run_id, "metrics_episodes.csv")

    return app
