"""
Training loop, EMA and finetuning.

One trainer owns its model for the whole run. Every random draw comes from
Rng(cfg.seed) split by purpose and step, so (config, seed) fixes the loss
curve in single-threaded deterministic mode.
"""
import csv
import logging
import math
import time
from itertools import count
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np
import torch

from app.core.config import settings
from app.core.errors import ConfigError, DataError, NumericError, ShapeError
from app.data.pipeline import Batch, ImagePair, augment, batches, load_dataset, read_manifest, scan_directory, stack
from app.data.synth import SynthOracle, synth_generate
from app.diffusion.process import training_loss
from app.diffusion.rng import Rng
from app.diffusion.schedule import schedule_from_config
from app.models.unet import UNet, build_unet, preset, weight_shape_table
from app.schemas.configs import DataSource, TrainConfig, UNetConfig
from app.schemas.manifests import CheckpointManifest
from app.services.checkpoint import Checkpoint, load_weights, save_checkpoint, state_arrays
from app.tensor.ops import backward

logger = logging.getLogger(__name__)

Tensor = torch.Tensor
Weights = Dict[str, Union[Tensor, np.ndarray]]


# ---------------------------------------------------------------------------
# EMA
# ---------------------------------------------------------------------------

def ema_update(ema_weights: Weights, weights: Weights, decay: float) -> Weights:
    """ema <- decay * ema + (1 - decay) * w, elementwise per named array."""
    if not (0.0 <= decay < 1.0):
        raise ValueError(f"decay must lie in [0, 1), got {decay}")
    if set(ema_weights) != set(weights):
        raise ShapeError("EMA and model weight names differ")
    out = {}
    for name, e in ema_weights.items():
        w = weights[name]
        if tuple(e.shape) != tuple(w.shape):
            raise ShapeError(f"{name}: EMA shape {tuple(e.shape)} vs weight shape {tuple(w.shape)}")
        out[name] = decay * e + (1.0 - decay) * w
    return out


class EMA:
    """Shadow copy of a model's parameters, updated after every optimizer step."""

    def __init__(self, model: torch.nn.Module, decay: float = 0.999):
        if not (0.0 <= decay < 1.0):
            raise ValueError(f"decay must lie in [0, 1), got {decay}")
        self.model = model
        self.decay = decay
        self.shadow = {name: p.detach().clone() for name, p in model.named_parameters()}

    @torch.no_grad()
    def update(self) -> None:
        for name, p in self.model.named_parameters():
            self.shadow[name].mul_(self.decay).add_(p.detach(), alpha=1.0 - self.decay)

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: t.cpu().to(torch.float32).numpy().copy() for name, t in self.shadow.items()}


# ---------------------------------------------------------------------------
# Config resolution
# ---------------------------------------------------------------------------

def resolve_model_config(cfg: TrainConfig) -> UNetConfig:
    """Explicit UNetConfig of a run: cfg.model, or the preset named by cfg.variant."""
    if cfg.model is not None:
        ucfg = cfg.model
        if ucfg.image_size != cfg.image_size:
            raise ConfigError(f"model image_size {ucfg.image_size} != run image_size {cfg.image_size}")
    else:
        if cfg.variant is None:
            raise ConfigError("either model or variant must be set")
        ucfg = preset(cfg.variant, cfg.image_size)
    if ucfg.in_channels_target != cfg.target_channels:
        ucfg = ucfg.model_copy(update={"in_channels_target": cfg.target_channels})
    return ucfg


def resolve_config(cfg: TrainConfig) -> TrainConfig:
    """Materialize every default so the frozen config replays the run."""
    return cfg.model_copy(update={"model": resolve_model_config(cfg), "variant": cfg.variant})


def run_dir(cfg: TrainConfig) -> Path:
    return Path(cfg.out_dir) if cfg.out_dir else Path(settings.THERMALDIFF_OUTPUT_ROOT) / cfg.run_name


def resolve_pairs(
    source: DataSource,
    image_size: int,
    target_channels: int = 1,
) -> Tuple[List[ImagePair], Optional[SynthOracle]]:
    """Materialize a DataSource: synthetic scenes or a split on disk."""
    if source.synth is not None:
        spec = source.synth
        if spec.image_size != image_size:
            spec = spec.model_copy(update={"image_size": image_size})
        pairs, oracle = synth_generate(spec, source.n, source.offset, target_channels)
    else:
        manifest_path = Path(source.root) / source.split / "manifest.json"
        manifest = read_manifest(str(manifest_path)) if manifest_path.exists() else scan_directory(source.root, source.split)
        manifest = manifest.model_copy(update={"root": source.root})
        pairs, oracle = load_dataset(manifest, image_size, target_channels), None
    if source.tag != "all":
        pairs = [p for p in pairs if p.tag == source.tag]
    return pairs, oracle


def _batch_stream(pairs: List[ImagePair], batch_size: int, seed: int) -> Iterator[Batch]:
    for epoch in count():
        yield from batches(pairs, batch_size, shuffle_seed=seed, epoch=epoch)


def _augment_batch(batch: Batch, rng: Rng) -> Batch:
    """Flip rows of the batch itself; ids need not be unique across a mixed set."""
    rows = [
        augment(ImagePair(batch.x[k], batch.y0[k], tag, pair_id), rng.split("flip", k))
        for k, (tag, pair_id) in enumerate(zip(batch.tags, batch.ids))
    ]
    return stack(rows)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def train(
    cfg: TrainConfig,
    pairs: Optional[List[ImagePair]] = None,
    init: Optional[Checkpoint] = None,
) -> Checkpoint:
    """
    Optimize the noise-prediction loss for cfg.steps steps.

    Args:
        cfg: run configuration
        pairs: preloaded training pairs (default: resolved from cfg.data)
        init: checkpoint to start from (finetuning); its config hash is recorded

    Returns:
        The final checkpoint, also written to <out>/last.ckpt
    """
    cfg = resolve_config(cfg)
    ucfg = cfg.model
    out = run_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.model_dump_json(indent=2))

    if pairs is None:
        pairs, _ = resolve_pairs(cfg.data, cfg.image_size, cfg.target_channels)
    if not pairs:
        raise DataError(f"run {cfg.run_name}: training set is empty")

    rng = Rng(cfg.seed)
    if init is None:
        model = build_unet(ucfg, rng.split("init"))
    else:
        model = UNet(ucfg)
        load_weights(model, init.weights(cfg.init_from_ema))
    model.train()

    schedule = schedule_from_config(cfg.schedule)
    optimizer = torch.optim.AdamW(
        model.parameters(),
        lr=cfg.optimizer.lr,
        betas=tuple(cfg.optimizer.betas),
        weight_decay=cfg.optimizer.weight_decay,
    )
    ema = EMA(model, cfg.ema_decay)
    stream = _batch_stream(pairs, cfg.batch_size, cfg.seed)
    config_hash = cfg.config_hash()
    base_hash = init.manifest.config_hash if init is not None else None

    logger.info(
        f"🎬 Training {cfg.run_name}: {len(pairs)} pairs, {cfg.steps} steps, batch {cfg.batch_size}, "
        f"T={schedule.T} ({schedule.kind}), config {config_hash[:12]}"
    )

    def snapshot(step: int, metrics: Dict[str, float]) -> Checkpoint:
        manifest = CheckpointManifest(
            config_hash=config_hash, base_config_hash=base_hash, step=step,
            model=ucfg, schedule=cfg.schedule, metrics=metrics, seed=cfg.seed,
        )
        return Checkpoint(manifest=manifest, raw=state_arrays(model), ema=ema.arrays())

    started = time.perf_counter()
    last_loss = math.nan
    with open(out / "loss.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["step", "loss", "lr", "seconds"])
        for step in range(1, cfg.steps + 1):
            batch = next(stream)
            step_rng = rng.split("step", step)
            if cfg.augment:
                batch = _augment_batch(batch, step_rng)
            n = batch.x.shape[0]
            t = torch.from_numpy(step_rng.split("t").integers(1, schedule.T + 1, (n,))).long()
            eps = step_rng.split("eps").normal(batch.y0.shape, dtype=batch.y0.dtype)

            loss = training_loss(model, batch.x, batch.y0, t, eps, schedule, cfg.loss_norm)
            if not torch.isfinite(loss):
                raise NumericError(
                    f"non-finite loss {loss.item()} at step {step}; batch ids {batch.ids}, timesteps {t.tolist()}"
                )
            optimizer.zero_grad(set_to_none=True)
            backward(loss)
            optimizer.step()
            ema.update()

            last_loss = loss.item()
            writer.writerow([step, repr(last_loss), cfg.optimizer.lr, f"{time.perf_counter() - started:.3f}"])
            if step % cfg.log_every == 0 or step == 1:
                logger.info(f"step {step}/{cfg.steps} loss {last_loss:.5f}")
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0 and step < cfg.steps:
                f.flush()
                save_checkpoint(snapshot(step, {"loss": last_loss}), str(out / f"step_{step}.ckpt"))

    final = snapshot(cfg.steps, {} if math.isnan(last_loss) else {"loss": last_loss})
    save_checkpoint(final, str(out / "last.ckpt"))
    logger.info(f"✅ Finished {cfg.run_name} in {time.perf_counter() - started:.1f}s (final loss {last_loss:.5f})")
    return final


def check_compatible(base: UNetConfig, target: UNetConfig) -> None:
    """Raise ConfigError unless both configs yield the same named weight shapes."""
    a, b = weight_shape_table(base), weight_shape_table(target)
    if a == b:
        return
    only_base = sorted(set(a) - set(b))
    only_target = sorted(set(b) - set(a))
    reshaped = sorted(k for k in set(a) & set(b) if a[k] != b[k])
    raise ConfigError(
        f"architecture mismatch: {len(only_base)} weights only in base {only_base[:3]}, "
        f"{len(only_target)} only in target {only_target[:3]}, {len(reshaped)} reshaped {reshaped[:3]}"
    )


def finetune(base: Checkpoint, cfg: TrainConfig, pairs: Optional[List[ImagePair]] = None) -> Checkpoint:
    """
    Continue training from a checkpoint on a new dataset with a fresh optimizer.

    Weights resume from the EMA copy when cfg.init_from_ema, else from the raw
    weights. The base config hash is stored in the new manifest.
    """
    target = resolve_model_config(cfg)
    check_compatible(base.manifest.model, target)
    if target != base.manifest.model:
        logger.info("Finetuning with a config that differs from the base only outside weight shapes")
    logger.info(f"Finetuning from {base.path or 'in-memory checkpoint'} (step {base.manifest.step})")
    return train(cfg, pairs=pairs, init=base)
