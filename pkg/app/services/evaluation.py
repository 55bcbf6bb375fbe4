"""
Sampling-based evaluation of checkpoints and of arbitrary prediction sets.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import torch

from app.core.config import settings
from app.core.errors import ConfigError, DataError, ShapeError
from app.data.pipeline import ImagePair
from app.diffusion.process import sample
from app.diffusion.rng import Rng
from app.metrics.frechet import Extractor, FeatureFileExtractor, RandomProjectionExtractor
from app.metrics.report import build_report, format_report
from app.schemas.configs import ScheduleConfig, UNetConfig
from app.schemas.reports import MetricsReport
from app.services.checkpoint import Checkpoint
from app.services.grids import save_image_grid

logger = logging.getLogger(__name__)

Tensor = torch.Tensor

LUMA = (0.299, 0.587, 0.114)


def default_extractor() -> Extractor:
    if settings.FEATURE_FILE:
        return FeatureFileExtractor(settings.FEATURE_FILE)
    return RandomProjectionExtractor(seed=0)


def grayscale_copy_baseline(pairs: Sequence[ImagePair]) -> List[Tensor]:
    """Predict thermal as the luminance of the RGB source."""
    out = []
    for p in pairs:
        luma = sum(w * p.source[c] for c, w in enumerate(LUMA)).clamp(-1.0, 1.0)
        out.append(luma[None].repeat(p.target.shape[0], 1, 1))
    return out


def evaluate_predictions(
    predictions: Sequence[Tensor],
    pairs: Sequence[ImagePair],
    extractor: Optional[Extractor] = None,
    label: str = "",
    seed: Optional[int] = None,
) -> MetricsReport:
    """Score predictions against the targets of the matching pairs."""
    if not pairs:
        raise DataError("evaluation set is empty")
    if len(predictions) != len(pairs):
        raise ShapeError(f"{len(predictions)} predictions for {len(pairs)} pairs")
    return build_report(
        list(predictions),
        [p.target for p in pairs],
        [p.id for p in pairs],
        [p.tag for p in pairs],
        extractor or default_extractor(),
        label=label,
        seed=seed,
    )


def _check_request(ckpt: Checkpoint, model: Optional[UNetConfig], schedule: Optional[ScheduleConfig]) -> None:
    if model is not None and model != ckpt.manifest.model:
        raise ConfigError("requested architecture does not match the checkpoint")
    if schedule is not None and schedule != ckpt.manifest.schedule:
        raise ConfigError(
            f"requested schedule {schedule.model_dump()} does not match checkpoint {ckpt.manifest.schedule.model_dump()}"
        )


def generate(
    ckpt: Checkpoint,
    pairs: Sequence[ImagePair],
    seed: int = 0,
    use_ema: bool = True,
    workers: Optional[int] = None,
) -> List[Tensor]:
    """
    Sample one prediction per pair. Each image draws from Rng(seed).split(id),
    so results do not depend on worker count or order.
    """
    model = ckpt.model(use_ema)
    schedule = ckpt.schedule
    variance = ckpt.manifest.schedule.variance
    root = Rng(seed).split("sample")

    def one(pair: ImagePair) -> Tensor:
        return sample(model, pair.source[None], schedule, root.split(pair.id), variance)[0]

    workers = workers or max(1, settings.EVAL_WORKERS)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, pairs))


def evaluate(
    ckpt: Checkpoint,
    eval_set: Sequence[ImagePair],
    n_samples: Optional[int] = None,
    seed: int = 0,
    use_ema: bool = True,
    extractor: Optional[Extractor] = None,
    model: Optional[UNetConfig] = None,
    schedule: Optional[ScheduleConfig] = None,
    label: str = "",
) -> Tuple[MetricsReport, List[Tensor]]:
    """
    Sample every pair (or the first n_samples by id) and score the results.

    Args:
        ckpt: checkpoint to evaluate
        eval_set: held-out pairs
        n_samples: cap on the number of pairs
        seed: root of the per-image sampling seeds
        use_ema: sample with the EMA weights
        extractor: FID feature extractor (default from settings)
        model, schedule: what the caller expects the checkpoint to contain

    Returns:
        (report, generated images in pair order)
    """
    _check_request(ckpt, model, schedule)
    pairs = sorted(eval_set, key=lambda p: p.id)
    if n_samples is not None:
        pairs = pairs[:n_samples]
    if not pairs:
        raise DataError("evaluation set is empty")
    logger.info(f"Evaluating step {ckpt.manifest.step} on {len(pairs)} pairs (seed {seed}, ema={use_ema})")
    generated = generate(ckpt, pairs, seed, use_ema)
    report = evaluate_predictions(generated, pairs, extractor, label=label, seed=seed)
    fid = "n/a" if report.fid is None else f"{report.fid:.3f}"
    logger.info(f"📊 {label or 'eval'}: PSNR {report.psnr_mean:.2f} dB, SSIM {report.ssim_mean:.3f}, FID {fid}")
    return report, generated


GRID_ROWS = 8


def write_evaluation(
    ckpt: Checkpoint,
    pairs: Sequence[ImagePair],
    out_dir: str,
    n_samples: Optional[int] = None,
    seed: int = 0,
    use_ema: bool = True,
    extractor: Optional[Extractor] = None,
) -> Path:
    """
    Evaluate and write report.json, report.txt and grid.png (source | GT | generated).

    Returns:
        Path of report.json
    """
    report, generated = evaluate(ckpt, pairs, n_samples, seed, use_ema, extractor, label=f"step {ckpt.manifest.step}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.model_dump_json(indent=2))
    (out / "report.txt").write_text(format_report(report))
    ordered = sorted(pairs, key=lambda p: p.id)
    rows = [[p.source, p.target, g] for p, g in zip(ordered, generated)][:GRID_ROWS]
    save_image_grid(rows, str(out / "grid.png"))
    return out / "report.json"
