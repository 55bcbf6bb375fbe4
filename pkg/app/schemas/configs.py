"""
Experiment configuration schemas.
Every config is a pydantic model so it can be frozen to JSON next to its outputs.
"""
import hashlib
import json
from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator


class ScheduleConfig(BaseModel):
    """Noise schedule parameters, serialized into every checkpoint manifest"""
    kind: Literal["linear", "cosine"] = Field(default="cosine", description="Schedule profile")
    T: int = Field(default=100, ge=1, description="Number of diffusion timesteps")
    beta_start: float = Field(default=1e-4, description="First beta of the linear profile")
    beta_end: float = Field(default=0.02, description="Last beta of the linear profile")
    variance: Literal["posterior", "beta"] = Field(
        default="posterior",
        description="Reverse variance: closed-form posterior variance or 1 - alpha_t"
    )

    @model_validator(mode="after")
    def _check_betas(self):
        if not (0.0 < self.beta_start <= self.beta_end < 1.0):
            raise ValueError(
                f"need 0 < beta_start <= beta_end < 1, got {self.beta_start}, {self.beta_end}"
            )
        return self


# Linear 1e-4..0.02 over 1000 steps, the guided-diffusion lineage default
LONG_LINEAR_SCHEDULE = ScheduleConfig(kind="linear", T=1000, beta_start=1e-4, beta_end=0.02)


def _is_power_of_two(v: int) -> bool:
    return v >= 1 and (v & (v - 1)) == 0


class UNetConfig(BaseModel):
    """Architecture of the conditional U-Net denoiser"""
    in_channels_source: int = Field(default=3, ge=1, description="Channels of the source (RGB) image")
    in_channels_target: int = Field(default=1, ge=1, description="Channels of the target (thermal) image")
    base_channels: int = Field(default=64, ge=2, description="Width of the first level")
    channel_mult: List[int] = Field(default_factory=lambda: [1, 2, 2, 4], description="Width multiplier per level")
    res_blocks_per_level: int = Field(default=2, ge=1)
    attention_levels: List[int] = Field(
        default_factory=lambda: [2, 4, 8, 16],
        description="Downsample factors that carry self-attention"
    )
    heads: int = Field(default=4, ge=1)
    groupnorm_groups: int = Field(default=16, ge=1)
    time_embed_dim: int = Field(default=256, ge=2)
    image_size: int = Field(default=64, ge=1, description="Square input extent used to validate factors")
    max_attention_tokens: int = Field(
        default=4096,
        ge=1,
        description="Largest token count (H*W) an attention block may see"
    )

    @field_validator("attention_levels")
    @classmethod
    def _sorted_unique(cls, v: List[int]) -> List[int]:
        return sorted(set(v))

    @property
    def levels(self) -> int:
        return len(self.channel_mult)

    @property
    def level_channels(self) -> List[int]:
        return [self.base_channels * m for m in self.channel_mult]

    @model_validator(mode="after")
    def _check_geometry(self):
        if not self.channel_mult or any(m < 1 for m in self.channel_mult):
            raise ValueError("channel_mult must be a non-empty list of positive ints")
        deepest = 2 ** self.levels
        if self.image_size % deepest:
            raise ValueError(f"image_size {self.image_size} not divisible by {deepest} ({self.levels} levels)")
        for f in self.attention_levels:
            if not _is_power_of_two(f) or f > deepest:
                raise ValueError(f"attention factor {f} must be a power of two <= {deepest}")
            if self.image_size % f:
                raise ValueError(f"attention factor {f} does not divide image_size {self.image_size}")
            tokens = (self.image_size // f) ** 2
            if tokens > self.max_attention_tokens:
                raise ValueError(
                    f"attention at factor {f} sees {tokens} tokens > max_attention_tokens {self.max_attention_tokens}"
                )
        if self.base_channels % 2:
            raise ValueError("base_channels must be even (sinusoidal time embedding)")
        for ch in [self.base_channels] + self.level_channels:
            if ch % self.groupnorm_groups:
                raise ValueError(f"{ch} channels not divisible by {self.groupnorm_groups} groups")
            if ch % self.heads:
                raise ValueError(f"{ch} channels not divisible by {self.heads} heads")
        return self


class OptimizerConfig(BaseModel):
    """Adaptive-moment optimizer settings"""
    lr: float = Field(default=1e-4, gt=0)
    betas: Tuple[float, float] = (0.9, 0.999)
    weight_decay: float = Field(default=0.0, ge=0)


class SynthSceneSpec(BaseModel):
    """Procedural street scene: pedestrians, vehicles, water, background"""
    image_size: int = Field(default=64, ge=8)
    mode: Literal["day", "night", "mixed"] = Field(default="day", description="mixed alternates day/night scenes")
    seed: int = Field(default=0, ge=0)
    pedestrians: Tuple[int, int] = Field(default=(1, 3), description="Count range per scene")
    pedestrian_height: Tuple[float, float] = Field(default=(0.18, 0.32), description="Height as a fraction of image size")
    vehicles: Tuple[int, int] = Field(default=(0, 2))
    vehicle_width: Tuple[float, float] = Field(default=(0.22, 0.36), description="Width as a fraction of image size")
    water: Tuple[int, int] = Field(default=(0, 1), description="Water bodies per scene")
    background_contrast: float = Field(default=0.12, ge=0, le=0.3)
    night_compression: float = Field(default=0.35, gt=0, lt=1, description="Target dynamic range kept at night")
    test_fraction: float = Field(default=0.2, ge=0, lt=1)

    @model_validator(mode="after")
    def _check_ranges(self):
        for name in ("pedestrians", "vehicles", "water"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} range {lo, hi} invalid")
        for name in ("pedestrian_height", "vehicle_width"):
            lo, hi = getattr(self, name)
            if not (0 <= lo <= hi <= 1):
                raise ValueError(f"{name} range {lo, hi} must satisfy 0 <= lo <= hi <= 1")
        return self


class DataSource(BaseModel):
    """A dataset on disk or a synthetic one"""
    root: Optional[str] = Field(default=None, description="Dataset root in the standard layout")
    split: Literal["train", "val", "test"] = "train"
    tag: Literal["day", "night", "all"] = "all"
    synth: Optional[SynthSceneSpec] = None
    n: int = Field(default=200, ge=1, description="Number of synthetic scenes")
    offset: int = Field(default=0, ge=0, description="Index of the first synthetic scene")

    @model_validator(mode="after")
    def _one_source(self):
        if (self.root is None) == (self.synth is None):
            raise ValueError("exactly one of root or synth must be given")
        return self


class TrainConfig(BaseModel):
    """Fully explicit training run"""
    run_name: str = "run"
    out_dir: Optional[str] = Field(default=None, description="Output directory; defaults under the output root")
    data: DataSource
    val: Optional[DataSource] = None
    variant: Optional[Literal["I", "II"]] = Field(default="II", description="Preset used when model is not given")
    image_size: int = 64
    target_channels: int = Field(default=1, ge=1)
    model: Optional[UNetConfig] = None
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    batch_size: int = Field(default=8, ge=1)
    steps: int = Field(default=3000, ge=0)
    ema_decay: float = Field(default=0.999, ge=0, lt=1)
    seed: int = Field(default=0, ge=0)
    checkpoint_every: int = Field(default=1000, ge=0, description="0 disables intermediate checkpoints")
    log_every: int = Field(default=50, ge=1)
    loss_norm: Literal["l1", "l2"] = "l2"
    augment: bool = True
    init_from_ema: bool = Field(default=True, description="Finetuning resumes EMA (True) or raw weights")

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON of everything but output location."""
        payload = self.model_dump(mode="json", exclude={"out_dir", "run_name"})
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class ExperimentConfig(BaseModel):
    """Shared settings for the synthetic day/night, attention and pretraining protocols"""
    name: str = "experiment"
    image_size: int = 64
    variant: Literal["I", "II"] = "II"
    model: Optional[UNetConfig] = None
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    batch_size: int = Field(default=8, ge=1)
    steps: int = Field(default=3000, ge=0)
    ema_decay: float = Field(default=0.999, ge=0, lt=1)
    loss_norm: Literal["l1", "l2"] = "l2"
    seed: int = Field(default=0, ge=0)
    synth: SynthSceneSpec = Field(default_factory=SynthSceneSpec)
    n_train: int = Field(default=200, ge=1, description="Training scenes per period")
    n_test: int = Field(default=40, ge=2, description="Held-out scenes per period")
    finetune_fraction: float = Field(default=0.1, gt=0, le=1, description="Size of the small finetuning set")
    eval_samples: Optional[int] = Field(default=None, ge=2, description="Cap on evaluated pairs per test set")

    def synth_source(self, mode: str, n: int, offset: int = 0) -> DataSource:
        spec = self.synth.model_copy(update={"mode": mode, "image_size": self.image_size})
        return DataSource(synth=spec, n=n, offset=offset)

    def train_config(self, run_name: str, data: DataSource, variant: Optional[str] = None, out_dir: Optional[str] = None) -> TrainConfig:
        return TrainConfig(
            run_name=run_name,
            out_dir=out_dir,
            data=data,
            variant=variant or self.variant,
            image_size=self.image_size,
            model=self.model,
            schedule=self.schedule,
            optimizer=self.optimizer,
            batch_size=self.batch_size,
            steps=self.steps,
            ema_decay=self.ema_decay,
            seed=self.seed,
            checkpoint_every=0,
            loss_norm=self.loss_norm,
        )
