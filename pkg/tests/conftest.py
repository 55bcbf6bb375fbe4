import pytest
import torch

from app.core.config import settings
from app.diffusion.rng import Rng
from app.diffusion.schedule import make_schedule
from app.models.unet import build_unet
from app.schemas.configs import DataSource, ScheduleConfig, SynthSceneSpec, TrainConfig, UNetConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale training tests")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def output_root(tmp_path, monkeypatch):
    root = tmp_path / "runs"
    monkeypatch.setattr(settings, "THERMALDIFF_OUTPUT_ROOT", str(root))
    return root


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


def make_tiny_unet_config(image_size: int = 16, **overrides) -> UNetConfig:
    fields = dict(
        base_channels=8,
        channel_mult=[1, 2],
        res_blocks_per_level=1,
        attention_levels=[2, 4],
        heads=2,
        groupnorm_groups=4,
        time_embed_dim=16,
        image_size=image_size,
        max_attention_tokens=(image_size // 2) ** 2,
    )
    fields.update(overrides)
    return UNetConfig(**fields)


@pytest.fixture
def tiny_unet_config():
    return make_tiny_unet_config()


@pytest.fixture
def tiny_model(tiny_unet_config):
    return build_unet(tiny_unet_config, Rng(0))


@pytest.fixture
def tiny_schedule_config():
    return ScheduleConfig(kind="cosine", T=10)


@pytest.fixture
def tiny_schedule(tiny_schedule_config):
    return make_schedule("cosine", 10)


def make_synth_spec(image_size: int = 16, **overrides) -> SynthSceneSpec:
    fields = dict(
        image_size=image_size,
        seed=3,
        pedestrian_height=(0.3, 0.45),
        vehicle_width=(0.3, 0.45),
    )
    fields.update(overrides)
    return SynthSceneSpec(**fields)


@pytest.fixture
def synth_spec():
    return make_synth_spec()


def make_train_config(out_dir, spec=None, steps: int = 2, n: int = 8, **overrides) -> TrainConfig:
    fields = dict(
        run_name="tiny",
        out_dir=str(out_dir),
        data=DataSource(synth=spec or make_synth_spec(), n=n),
        image_size=16,
        model=make_tiny_unet_config(),
        schedule=ScheduleConfig(kind="cosine", T=10),
        batch_size=4,
        steps=steps,
        ema_decay=0.9,
        checkpoint_every=0,
        log_every=1,
    )
    fields.update(overrides)
    return TrainConfig(**fields)
