"""
Request and status schemas of the background job service.
"""
from typing import Literal, Optional

from pydantic import BaseModel, Field

from app.schemas.configs import DataSource


class EvaluateRequest(BaseModel):
    """Evaluate a checkpoint on a dataset"""
    ckpt: str = Field(description="Path to a checkpoint file")
    data: DataSource = Field(description="Evaluation pairs")
    n_samples: Optional[int] = Field(default=None, ge=1, description="Cap on evaluated pairs")
    seed: int = Field(default=0, ge=0)
    use_ema: bool = True
    out_dir: Optional[str] = Field(default=None, description="Where report files go; defaults under the output root")


class JobStatus(BaseModel):
    job_id: str
    kind: Literal["train", "evaluate"]
    status: Literal["queued", "processing", "completed", "failed"] = "queued"
    created_at: str
    started_at: Optional[str] = None
    completed_at: Optional[str] = None
    output_path: Optional[str] = Field(default=None, description="Result file served by /jobs/{id}/result")
    error: Optional[str] = None
