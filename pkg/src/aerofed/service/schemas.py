"""Pydantic request/response models for the experiment service."""

from __future__ import annotations

from pydantic import BaseModel, Field


class RunRequest(BaseModel):
    """Submit an experiment: optional config-file text plus dotted-key
    overrides (same precedence as the CLI: overrides win)."""

    config_text: str = ""
    overrides: dict[str, str] = Field(default_factory=dict)


class RunInfo(BaseModel):
    id: str
    state: str  # queued | running | succeeded | failed
    algo: str
    seed: int
    episodes: int
    slots: int
    error_kind: str | None = None  # dataset_missing | divergence | error
    error_detail: str | None = None


class RunCreated(BaseModel):
    id: str


class RunList(BaseModel):
    runs: list[RunInfo]


class ValidateRequest(BaseModel):
    config_text: str = ""
    overrides: dict[str, str] = Field(default_factory=dict)


class ValidateResponse(BaseModel):
    valid: bool
    error: str | None = None


class HealthResponse(BaseModel):
    status: str
    version: str
