"""
Assembling MetricsReport objects and rendering them as aligned text tables.
"""
import logging
from typing import List, Optional, Sequence

import torch

from app.data.pipeline import denormalize
from app.metrics.frechet import Extractor, feature_stats, frechet_distance
from app.metrics.quality import psnr, ssim
from app.metrics.spread import compare_histograms, intensity_spread
from app.schemas.reports import (
    AttentionAblationReport,
    DayNightMatrixReport,
    ImageRecord,
    MetricsReport,
    PretrainingReport,
)

logger = logging.getLogger(__name__)

MIN_FID_IMAGES = 2


def build_report(
    generated: Sequence[torch.Tensor],
    reference: Sequence[torch.Tensor],
    ids: Sequence[str],
    tags: Sequence[str],
    extractor: Extractor,
    label: str = "",
    seed: Optional[int] = None,
) -> MetricsReport:
    """
    Score generated images against references, both in [-1, 1].

    PSNR and SSIM are computed per image on [0, 1]; means are reduced in id
    order. FID compares the two sets as wholes.
    """
    records = []
    for gen, ref, pair_id, tag in zip(generated, reference, ids, tags):
        g, r = denormalize(gen), denormalize(ref)
        records.append(ImageRecord(id=pair_id, tag=tag, psnr=psnr(g, r, 1.0), ssim=ssim(g, r, 1.0)))

    fid = None
    if len(records) >= MIN_FID_IMAGES:
        fid = frechet_distance(
            feature_stats(generated, extractor, [f"generated/{i}" for i in ids]),
            feature_stats(reference, extractor, [f"reference/{i}" for i in ids]),
        )
    else:
        logger.warning(f"FID needs at least {MIN_FID_IMAGES} images, got {len(records)}; reporting it as undefined")
    gen_spread = intensity_spread(generated)
    ref_spread = intensity_spread(reference)
    n = len(records)
    return MetricsReport(
        label=label,
        n_images=n,
        psnr_mean=sum(r.psnr for r in records) / n,
        ssim_mean=sum(r.ssim for r in records) / n,
        fid=fid,
        extractor=getattr(extractor, "name", type(extractor).__name__),
        generated_spread=gen_spread,
        reference_spread=ref_spread,
        histogram=compare_histograms(gen_spread, ref_spread),
        records=records,
        seed=seed,
    )


def _table(header: List[str], rows: List[List[str]]) -> str:
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]

    def line(cells: List[str]) -> str:
        return "  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip()

    sep = "  ".join("-" * w for w in widths)
    return "\n".join([line(header), sep] + [line(r) for r in rows]) + "\n"


def _fid(value: Optional[float], digits: int = 4) -> str:
    return "n/a" if value is None else f"{value:.{digits}f}"


def _cell(r: MetricsReport) -> str:
    return f"{r.psnr_mean:.2f} / {r.ssim_mean:.3f} / {_fid(r.fid, 2)}"


def format_report(report: MetricsReport) -> str:
    rows = [
        ["PSNR (dB)", f"{report.psnr_mean:.3f}"],
        ["SSIM", f"{report.ssim_mean:.4f}"],
        ["FID", _fid(report.fid)],
        ["std generated / reference", f"{report.generated_spread.std_dev:.4f} / {report.reference_spread.std_dev:.4f}"],
        ["IQR generated / reference", f"{report.generated_spread.iqr:.4f} / {report.reference_spread.iqr:.4f}"],
        ["histogram intersection", f"{report.histogram.intersection:.4f}"],
        ["contrast ratio", f"{report.histogram.contrast_ratio:.4f}"],
        ["images", str(report.n_images)],
    ]
    title = f"{report.label}\n" if report.label else ""
    return title + _table(["metric", "value"], rows) + f"FID extractor: {report.extractor}\n"


def format_matrix(matrix: DayNightMatrixReport) -> str:
    """Test period rows, training data columns; cells are PSNR / SSIM / FID."""
    rows = [[f"test: {r}"] + [_cell(matrix.cells[r][c]) for c in matrix.columns] for r in matrix.rows]
    header = ["PSNR / SSIM / FID"] + [f"train: {c}" for c in matrix.columns]
    extractor = matrix.cells[matrix.rows[0]][matrix.columns[0]].extractor
    return _table(header, rows) + f"FID extractor: {extractor}\n"


def format_attention(report: AttentionAblationReport) -> str:
    rows = []
    for name, factors, r in (
        ("Model I", report.model_i_factors, report.model_i),
        ("Model II", report.model_ii_factors, report.model_ii),
    ):
        loss = report.final_loss.get(name)
        rows.append([
            name, ",".join(str(f) for f in factors), f"{r.psnr_mean:.3f}", f"{r.ssim_mean:.4f}",
            _fid(r.fid), "-" if loss is None else f"{loss:.4f}",
        ])
    header = ["model", "attention factors", "PSNR", "SSIM", "FID", "final loss"]
    return _table(header, rows) + f"FID extractor: {report.model_i.extractor}\n"


def format_pretraining(report: PretrainingReport) -> str:
    rows = [
        ["pretrained + finetuned", _cell(report.pretrained)],
        ["scratch", _cell(report.scratch)],
    ]
    return (
        _table(["training", "PSNR / SSIM / FID"], rows)
        + f"PSNR gain from pretraining: {report.psnr_gain:+.3f} dB\n"
        + f"base config: {report.base_config_hash}\n"
    )
