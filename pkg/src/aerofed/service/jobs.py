"""In-process job store: experiments run one at a time on a worker thread,
writing their artifacts under the service workdir."""

from __future__ import annotations

import os
import queue
import threading
import traceback
from dataclasses import dataclass

from .. import nn
from ..config import RunConfig, apply_overrides, parse_config_text
from ..runner import DatasetMissingError, run_experiment


def build_config(config_text: str, overrides: dict[str, str]) -> RunConfig:
    cfg = RunConfig()
    if config_text:
        apply_overrides(cfg, parse_config_text(config_text))
    if overrides:
        apply_overrides(cfg, overrides)
    cfg.validate()
    return cfg


@dataclass
class Job:
    id: str
    cfg: RunConfig
    out_dir: str
    state: str = "queued"
    error_kind: str | None = None
    error_detail: str | None = None


class JobStore:
    """Sequential experiment executor with a directory per run."""

    def __init__(self, workdir: str):
        self.workdir = workdir
        os.makedirs(workdir, exist_ok=True)
        self._jobs: dict[str, Job] = {}
        self._order: list[str] = []
        self._queue: queue.Queue[str] = queue.Queue()
        self._lock = threading.Lock()
        self._counter = 0
        self._worker: threading.Thread | None = None

    def _ensure_worker(self) -> None:
        if self._worker is None or not self._worker.is_alive():
            self._worker = threading.Thread(target=self._run_loop, daemon=True)
            self._worker.start()

    def submit(self, cfg: RunConfig) -> Job:
        with self._lock:
            self._counter += 1
            job_id = f"run-{self._counter:04d}"
            job = Job(job_id, cfg, os.path.join(self.workdir, job_id))
            self._jobs[job_id] = job
            self._order.append(job_id)
        self._queue.put(job_id)
        self._ensure_worker()
        return job

    def get(self, job_id: str) -> Job | None:
        with self._lock:
            return self._jobs.get(job_id)

    def all(self) -> list[Job]:
        with self._lock:
            return [self._jobs[j] for j in self._order]

    def artifact_path(self, job_id: str, name: str) -> str:
        return os.path.join(self.workdir, job_id, name)

    def _run_loop(self) -> None:
        while True:
            job_id = self._queue.get()
            job = self.get(job_id)
            if job is None:
                continue
            job.state = "running"
            try:
                run_experiment(job.cfg, out_dir=job.out_dir)
                job.state = "succeeded"
            except DatasetMissingError as exc:
                job.state = "failed"
                job.error_kind = "dataset_missing"
                job.error_detail = str(exc)
            except nn.DivergenceError as exc:
                job.state = "failed"
                job.error_kind = "divergence"
                job.error_detail = str(exc)
            except Exception as exc:  # surfaced via the status endpoint
                job.state = "failed"
                job.error_kind = "error"
                job.error_detail = f"{exc}\n{traceback.format_exc()}"
