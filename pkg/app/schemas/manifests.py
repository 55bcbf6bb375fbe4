"""
Manifest schemas for datasets on disk and checkpoint files.
"""
from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, Field

from app.schemas.configs import ScheduleConfig, UNetConfig

Tag = Literal["day", "night", "untagged"]


class ManifestEntry(BaseModel):
    """One aligned (source, target) file pair"""
    id: str = Field(description="Pair id, the shared file stem")
    source_path: str = Field(description="RGB file, relative to the manifest root")
    target_path: str = Field(description="Thermal file, relative to the manifest root")
    tag: Tag = "untagged"


class DatasetManifest(BaseModel):
    """Dataset split in the root/{split}/{rgb,thermal}/<id>.png layout"""
    root: str = Field(description="Dataset root directory")
    split: Literal["train", "val", "test"] = "train"
    entries: List[ManifestEntry] = Field(default_factory=list)
    thermal_clip: Optional[List[float]] = Field(
        default=None,
        description="Global (low, high) raw 16-bit values mapped to [-1, 1]; None for 8-bit data"
    )
    synthetic: bool = Field(default=False, description="Written by the synthetic generator")

    def filter_tag(self, tag: str) -> "DatasetManifest":
        if tag == "all":
            return self
        return self.model_copy(update={"entries": [e for e in self.entries if e.tag == tag]})


class CheckpointManifest(BaseModel):
    """JSON header of a checkpoint file"""
    version: int = 1
    config_hash: str = Field(description="Hash of the TrainConfig that produced the weights")
    base_config_hash: Optional[str] = Field(default=None, description="Hash of the checkpoint finetuned from")
    step: int = 0
    model: UNetConfig
    schedule: ScheduleConfig
    metrics: Dict[str, float] = Field(default_factory=dict, description="Metrics snapshot at save time")
    seed: int = 0
