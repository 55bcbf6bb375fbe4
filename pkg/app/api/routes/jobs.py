"""
Background training and evaluation jobs.
"""
import logging
import os
import uuid
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict

from fastapi import APIRouter, BackgroundTasks, HTTPException
from fastapi.responses import FileResponse

from app.core.config import settings
from app.schemas.configs import TrainConfig
from app.schemas.jobs import EvaluateRequest, JobStatus
from app.services.checkpoint import load_checkpoint
from app.services.evaluation import write_evaluation
from app.services.trainer import resolve_pairs, run_dir, train

logger = logging.getLogger(__name__)

router = APIRouter(prefix="/jobs", tags=["Jobs"])

# Job storage (in-process; one worker)
jobs: Dict[str, JobStatus] = {}


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _new_job(kind: str) -> JobStatus:
    job = JobStatus(job_id=str(uuid.uuid4()), kind=kind, created_at=_now())
    jobs[job.job_id] = job
    return job


def _fail(job: JobStatus, e: Exception) -> None:
    job.status = "failed"
    job.error = f"{type(e).__name__}: {e}"
    job.completed_at = _now()
    logger.error(f"Job {job.job_id} failed: {job.error}")


def run_train_job(job_id: str, cfg: TrainConfig) -> None:
    job = jobs[job_id]
    try:
        job.status = "processing"
        job.started_at = _now()
        ckpt = train(cfg)
        job.output_path = ckpt.path
        job.status = "completed"
        job.completed_at = _now()
        logger.info(f"✅ Train job {job_id} finished: {ckpt.path}")
    except Exception as e:
        _fail(job, e)


def run_evaluate_job(job_id: str, request: EvaluateRequest) -> None:
    job = jobs[job_id]
    try:
        job.status = "processing"
        job.started_at = _now()
        ckpt = load_checkpoint(request.ckpt)
        image_size = ckpt.manifest.model.image_size
        pairs, _ = resolve_pairs(request.data, image_size, ckpt.manifest.model.in_channels_target)
        out_dir = request.out_dir or str(Path(settings.THERMALDIFF_OUTPUT_ROOT) / "jobs" / job_id)
        report_path = write_evaluation(ckpt, pairs, out_dir, request.n_samples, request.seed, request.use_ema)
        job.output_path = str(report_path)
        job.status = "completed"
        job.completed_at = _now()
        logger.info(f"✅ Evaluate job {job_id} finished: {report_path}")
    except Exception as e:
        _fail(job, e)


@router.post("/train", response_model=JobStatus)
async def submit_train(cfg: TrainConfig, background_tasks: BackgroundTasks):
    if cfg.out_dir is None:
        cfg = cfg.model_copy(update={"out_dir": str(run_dir(cfg))})
    job = _new_job("train")
    background_tasks.add_task(run_train_job, job.job_id, cfg)
    return job


@router.post("/evaluate", response_model=JobStatus)
async def submit_evaluate(request: EvaluateRequest, background_tasks: BackgroundTasks):
    job = _new_job("evaluate")
    background_tasks.add_task(run_evaluate_job, job.job_id, request)
    return job


@router.get("/{job_id}/status", response_model=JobStatus)
async def get_job_status(job_id: str):
    if job_id not in jobs:
        raise HTTPException(status_code=404, detail="Job not found")
    return jobs[job_id]


@router.get("/{job_id}/result")
async def get_job_result(job_id: str):
    if job_id not in jobs:
        raise HTTPException(status_code=404, detail="Job not found")

    job = jobs[job_id]
    if job.status != "completed":
        raise HTTPException(status_code=400, detail="Job not completed")

    if not job.output_path or not os.path.exists(job.output_path):
        raise HTTPException(status_code=500, detail="Output file missing")

    return FileResponse(job.output_path)
