"""
Controlled experiments: the day/night train-test matrix, the attention
placement ablation, and pretrain-then-finetune against training from scratch.
"""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import torch

from app.core.errors import ConfigError
from app.data.pipeline import ImagePair
from app.models.unet import UNet
from app.schemas.configs import ExperimentConfig, TrainConfig, UNetConfig
from app.schemas.reports import AttentionAblationReport, DayNightMatrixReport, PretrainingReport
from app.metrics.frechet import Extractor
from app.services.evaluation import evaluate
from app.services.trainer import finetune, resolve_model_config, resolve_pairs, train

logger = logging.getLogger(__name__)

RUN_FIELDS = {"run_name", "out_dir"}


def attention_factors_of(cfg: UNetConfig) -> List[int]:
    """Attention factors of the network a config builds, read off the module tree."""
    with torch.device("meta"):
        return UNet(cfg).attention_factors()


def _shared_setup(cfgs: Sequence[TrainConfig]) -> None:
    models = [resolve_model_config(c) for c in cfgs]
    if any(m != models[0] for m in models[1:]):
        raise ConfigError("training configs must share one architecture")
    if any(c.schedule != cfgs[0].schedule for c in cfgs[1:]):
        raise ConfigError("training configs must share one noise schedule")


def ablation_matrix(
    day_cfg: TrainConfig,
    night_cfg: TrainConfig,
    combined_cfg: TrainConfig,
    eval_sets: Dict[str, List[ImagePair]],
    n_samples: Optional[int] = None,
    seed: int = 0,
    extractor: Optional[Extractor] = None,
) -> DayNightMatrixReport:
    """
    Train on day, night and day+night data; evaluate each model on the day
    and night test sets.

    Returns:
        cells[test period][training data] for test periods day/night and
        training data day/night/day+night
    """
    _shared_setup([day_cfg, night_cfg, combined_cfg])
    missing = {"day", "night"} - set(eval_sets)
    if missing:
        raise ConfigError(f"eval_sets lacks {sorted(missing)}")

    cells: Dict[str, Dict[str, object]] = {"day": {}, "night": {}}
    for column, cfg in (("day", day_cfg), ("night", night_cfg), ("day+night", combined_cfg)):
        ckpt = train(cfg)
        for row in ("day", "night"):
            report, _ = evaluate(
                ckpt, eval_sets[row], n_samples, seed, extractor=extractor,
                label=f"train {column} / test {row}",
            )
            cells[row][column] = report
    return DayNightMatrixReport(cells=cells)


def check_attention_only(cfg_i: TrainConfig, cfg_ii: TrainConfig) -> None:
    """Raise ConfigError unless the configs differ in attention placement alone."""
    a = cfg_i.model_dump(exclude=RUN_FIELDS | {"model", "variant"})
    b = cfg_ii.model_dump(exclude=RUN_FIELDS | {"model", "variant"})
    diff = sorted(k for k in a if a[k] != b[k])
    ma = resolve_model_config(cfg_i).model_dump()
    mb = resolve_model_config(cfg_ii).model_dump()
    diff += sorted(f"model.{k}" for k in ma if k != "attention_levels" and ma[k] != mb[k])
    if diff:
        raise ConfigError(f"attention ablation configs must differ only in attention_levels; also differ in {diff}")


def check_attention_placement(factors_i: Sequence[int], factors_ii: Sequence[int]) -> None:
    """Model II must attend at factor 2 and Model I must not."""
    if 2 not in factors_ii:
        raise ConfigError(f"Model II has no attention block at factor 2 (factors {sorted(set(factors_ii))})")
    if 2 in factors_i:
        raise ConfigError(f"Model I has an attention block at factor 2 (factors {sorted(set(factors_i))})")


def ablate_attention(
    cfg_i: TrainConfig,
    cfg_ii: TrainConfig,
    eval_set: List[ImagePair],
    n_samples: Optional[int] = None,
    seed: int = 0,
    extractor: Optional[Extractor] = None,
) -> AttentionAblationReport:
    """Train and evaluate two models that differ only in where attention runs."""
    check_attention_only(cfg_i, cfg_ii)
    factors_i = attention_factors_of(resolve_model_config(cfg_i))
    factors_ii = attention_factors_of(resolve_model_config(cfg_ii))
    check_attention_placement(factors_i, factors_ii)
    logger.info(f"Attention ablation: Model I at {sorted(set(factors_i))}, Model II at {sorted(set(factors_ii))}")

    reports, losses = {}, {}
    for name, cfg in (("Model I", cfg_i), ("Model II", cfg_ii)):
        ckpt = train(cfg)
        reports[name], _ = evaluate(ckpt, eval_set, n_samples, seed, extractor=extractor, label=name)
        if "loss" in ckpt.manifest.metrics:
            losses[name] = ckpt.manifest.metrics["loss"]
    return AttentionAblationReport(
        model_i_factors=sorted(set(factors_i)),
        model_ii_factors=sorted(set(factors_ii)),
        model_i=reports["Model I"],
        model_ii=reports["Model II"],
        final_loss=losses,
    )


def compare_pretraining(
    pretrain_cfg: TrainConfig,
    finetune_cfg: TrainConfig,
    scratch_cfg: TrainConfig,
    eval_set: List[ImagePair],
    n_samples: Optional[int] = None,
    seed: int = 0,
    extractor: Optional[Extractor] = None,
) -> PretrainingReport:
    """Pretrain, finetune on a small set, and compare with scratch training on that set."""
    _shared_setup([pretrain_cfg, finetune_cfg, scratch_cfg])
    base = train(pretrain_cfg)
    tuned = finetune(base, finetune_cfg)
    scratch = train(scratch_cfg)
    pretrained_report, _ = evaluate(tuned, eval_set, n_samples, seed, extractor=extractor, label="pretrained + finetuned")
    scratch_report, _ = evaluate(scratch, eval_set, n_samples, seed, extractor=extractor, label="scratch")
    return PretrainingReport(
        pretrained=pretrained_report,
        scratch=scratch_report,
        base_config_hash=base.manifest.config_hash,
    )


# ---------------------------------------------------------------------------
# Synthetic protocol setups
# ---------------------------------------------------------------------------

def _test_set(exp: ExperimentConfig, mode: str) -> List[ImagePair]:
    pairs, _ = resolve_pairs(exp.synth_source(mode, exp.n_test, offset=exp.n_train), exp.image_size)
    return pairs


def daynight_configs(exp: ExperimentConfig, out_root: Path) -> Dict[str, TrainConfig]:
    return {
        mode: exp.train_config(
            f"{exp.name}-{mode}",
            exp.synth_source({"day": "day", "night": "night", "day+night": "mixed"}[mode], exp.n_train),
            out_dir=str(out_root / f"train-{mode.replace('+', '-')}"),
        )
        for mode in ("day", "night", "day+night")
    }


def run_daynight(exp: ExperimentConfig, out_root: Path, extractor: Optional[Extractor] = None) -> DayNightMatrixReport:
    cfgs = daynight_configs(exp, out_root)
    eval_sets = {mode: _test_set(exp, mode) for mode in ("day", "night")}
    return ablation_matrix(
        cfgs["day"], cfgs["night"], cfgs["day+night"], eval_sets, exp.eval_samples, exp.seed, extractor,
    )


def attention_configs(exp: ExperimentConfig, out_root: Path) -> Dict[str, TrainConfig]:
    """Model I / Model II configs; a custom model gets factor 2 removed / added."""
    data = exp.synth_source("day", exp.n_train)
    if exp.model is None:
        cfg_i = exp.train_config(f"{exp.name}-model-I", data, variant="I", out_dir=str(out_root / "model-I"))
        cfg_ii = exp.train_config(f"{exp.name}-model-II", data, variant="II", out_dir=str(out_root / "model-II"))
        return {"I": cfg_i, "II": cfg_ii}
    levels = set(exp.model.attention_levels)
    model_i = exp.model.model_copy(update={"attention_levels": sorted(levels - {2})})
    model_ii = exp.model.model_copy(update={"attention_levels": sorted(levels | {2})})
    cfg_i = exp.train_config(f"{exp.name}-model-I", data, out_dir=str(out_root / "model-I"))
    cfg_ii = exp.train_config(f"{exp.name}-model-II", data, out_dir=str(out_root / "model-II"))
    return {
        "I": cfg_i.model_copy(update={"model": UNetConfig.model_validate(model_i.model_dump())}),
        "II": cfg_ii.model_copy(update={"model": UNetConfig.model_validate(model_ii.model_dump())}),
    }


def run_attention(exp: ExperimentConfig, out_root: Path, extractor: Optional[Extractor] = None) -> AttentionAblationReport:
    cfgs = attention_configs(exp, out_root)
    return ablate_attention(cfgs["I"], cfgs["II"], _test_set(exp, "day"), exp.eval_samples, exp.seed, extractor)


def pretraining_configs(exp: ExperimentConfig, out_root: Path) -> Dict[str, TrainConfig]:
    """Large day pretraining set; small night set for both finetuning and scratch training."""
    n_small = max(1, int(round(exp.n_train * exp.finetune_fraction)))
    small_night = exp.synth_source("night", n_small)
    return {
        "pretrain": exp.train_config(f"{exp.name}-pretrain", exp.synth_source("day", exp.n_train), out_dir=str(out_root / "pretrain")),
        "finetune": exp.train_config(f"{exp.name}-finetune", small_night, out_dir=str(out_root / "finetune")),
        "scratch": exp.train_config(f"{exp.name}-scratch", small_night, out_dir=str(out_root / "scratch")),
    }


def run_pretraining(exp: ExperimentConfig, out_root: Path, extractor: Optional[Extractor] = None) -> PretrainingReport:
    cfgs = pretraining_configs(exp, out_root)
    return compare_pretraining(
        cfgs["pretrain"], cfgs["finetune"], cfgs["scratch"], _test_set(exp, "night"),
        exp.eval_samples, exp.seed, extractor,
    )
