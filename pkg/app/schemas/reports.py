"""
Evaluation report schemas. Reports are written as JSON and as plain-text tables.
"""
from typing import Dict, List, Optional

from pydantic import BaseModel, Field


class ImageRecord(BaseModel):
    id: str
    tag: str = "untagged"
    psnr: float
    ssim: float


class SpreadStats(BaseModel):
    """Pooled pixel statistics of a set of images in [-1, 1]"""
    std_dev: float
    iqr: float
    histogram: List[int] = Field(description="256 bins over [-1, 1]")


class HistogramComparison(BaseModel):
    """How far the generated intensity distribution drifts from the reference one"""
    intersection: float = Field(description="Sum of min(p, q) over normalized histograms, in [0, 1]")
    contrast_ratio: float = Field(description="std(generated) / std(reference); < 1 means compressed contrast")


class MetricsReport(BaseModel):
    """Quality of one set of generated images against ground truth"""
    label: str = ""
    n_images: int
    psnr_mean: float
    ssim_mean: float
    fid: Optional[float] = Field(default=None, description="Fréchet distance; None when fewer than 2 images")
    extractor: str = Field(description="Feature extractor; FID values compare only within one extractor")
    generated_spread: SpreadStats
    reference_spread: SpreadStats
    histogram: HistogramComparison
    records: List[ImageRecord] = Field(default_factory=list)
    seed: Optional[int] = None

    def headline(self) -> Dict[str, float]:
        return {"psnr": self.psnr_mean, "ssim": self.ssim_mean, "fid": self.fid}


class DayNightMatrixReport(BaseModel):
    """Test period (rows) x training data (columns) grid"""
    rows: List[str] = Field(default_factory=lambda: ["day", "night"])
    columns: List[str] = Field(default_factory=lambda: ["day", "night", "day+night"])
    cells: Dict[str, Dict[str, MetricsReport]] = Field(description="cells[test][train]")

    def grid(self, metric: str) -> List[List[float]]:
        return [[self.cells[r][c].headline()[metric] for c in self.columns] for r in self.rows]


class AttentionAblationReport(BaseModel):
    """Side-by-side evaluation of two models differing only in attention placement"""
    model_i_factors: List[int]
    model_ii_factors: List[int]
    model_i: MetricsReport
    model_ii: MetricsReport
    final_loss: Dict[str, float] = Field(default_factory=dict)


class PretrainingReport(BaseModel):
    """Finetuned-from-pretrained vs trained-from-scratch on the same small set"""
    pretrained: MetricsReport
    scratch: MetricsReport
    base_config_hash: str

    @property
    def psnr_gain(self) -> float:
        return self.pretrained.psnr_mean - self.scratch.psnr_mean
