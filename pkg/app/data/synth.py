"""
Procedural street scenes with an exact RGB -> thermal rendering rule.

A scene layout depends only on (spec.seed, scene index), so the day and night
renderings of index i show the same objects. Thermal rules:

- background: smooth field in [0, 0.35]
- pedestrians: 0.95 whatever their clothing colour
- vehicles: body 0.55, tire strips 0.85
- water: cooler than terrain by day, warmer at night
- night: target compressed around 0.45, RGB darkened
"""
import hashlib
import logging
import math
from typing import Dict, List, Optional, Tuple

import numpy as np
import torch
from pydantic import BaseModel, Field

from app.core.errors import DataError
from app.data.pipeline import ImagePair, normalize
from app.diffusion.rng import Rng
from app.schemas.configs import SynthSceneSpec

logger = logging.getLogger(__name__)

Tensor = torch.Tensor

PEDESTRIAN_HEAT = 0.95
VEHICLE_BODY_HEAT = 0.55
TIRE_HEAT = 0.85
WATER_HEAT = {"day": 0.05, "night": 0.5}
BACKGROUND_MAX = 0.35
NIGHT_CENTER = 0.45
NIGHT_RGB_GAIN = 0.35
TIRE_COLOR = (0.08, 0.08, 0.08)
WATER_COLOR = (0.16, 0.32, 0.55)


class Pedestrian(BaseModel):
    cx: float
    cy: float
    rx: float
    ry: float
    color: Tuple[float, float, float]


class Vehicle(BaseModel):
    x0: float
    y0: float
    width: float
    height: float
    tire_height: float
    color: Tuple[float, float, float]


class Water(BaseModel):
    cx: float
    cy: float
    rx: float
    ry: float


class SceneLayout(BaseModel):
    """Everything needed to re-render one scene"""
    index: int
    night: bool
    angle: float = Field(description="Direction of the background thermal gradient")
    base_heat: float
    contrast: float
    horizon: float = Field(description="Sky/ground boundary as a fraction of height")
    sky_color: Tuple[float, float, float]
    ground_color: Tuple[float, float, float]
    pedestrians: List[Pedestrian] = Field(default_factory=list)
    vehicles: List[Vehicle] = Field(default_factory=list)
    water: List[Water] = Field(default_factory=list)

    @property
    def tag(self) -> str:
        return "night" if self.night else "day"


def _check_spec(spec: SynthSceneSpec) -> None:
    s = spec.image_size
    if spec.pedestrians[1] > 0 and spec.pedestrian_height[0] * s < 2.0:
        raise DataError(f"pedestrian height {spec.pedestrian_height[0]} x {s}px collapses below 2 pixels")
    if spec.vehicles[1] > 0 and spec.vehicle_width[0] * s < 4.0:
        raise DataError(f"vehicle width {spec.vehicle_width[0]} x {s}px collapses below 4 pixels")


def sample_layout(spec: SynthSceneSpec, index: int) -> SceneLayout:
    """Draw the layout of scene `index`; independent of the day/night mode."""
    rng = Rng(spec.seed).split("scene", index)
    s = float(spec.image_size)

    def u(lo: float, hi: float) -> float:
        return float(rng.uniform(lo, hi))

    def color() -> Tuple[float, float, float]:
        return tuple(float(c) for c in rng.uniform(0.05, 0.95, (3,)))

    pedestrians = []
    for _ in range(int(rng.integers(spec.pedestrians[0], spec.pedestrians[1] + 1))):
        ry = u(*spec.pedestrian_height) * s / 2
        rx = ry * u(0.3, 0.45)
        pedestrians.append(Pedestrian(
            cx=u(rx, s - rx), cy=u(min(0.45 * s, s - ry), s - ry), rx=rx, ry=ry, color=color(),
        ))

    vehicles = []
    for _ in range(int(rng.integers(spec.vehicles[0], spec.vehicles[1] + 1))):
        w = u(*spec.vehicle_width) * s
        h = w * u(0.4, 0.6)
        vehicles.append(Vehicle(
            x0=u(0, s - w), y0=u(min(0.5 * s, s - h), s - h), width=w, height=h,
            tire_height=max(1.0, 0.2 * h), color=color(),
        ))

    water = []
    for _ in range(int(rng.integers(spec.water[0], spec.water[1] + 1))):
        rx, ry = u(0.15, 0.3) * s, u(0.04, 0.08) * s
        water.append(Water(cx=u(rx, s - rx), cy=u(0.7 * s, s - ry), rx=rx, ry=ry))

    night = spec.mode == "night" or (spec.mode == "mixed" and index % 2 == 1)
    return SceneLayout(
        index=index,
        night=night,
        angle=u(0, 2 * math.pi),
        base_heat=u(0.08, 0.2),
        contrast=spec.background_contrast * u(0.5, 1.0),
        horizon=u(0.3, 0.5),
        sky_color=(u(0.45, 0.7), u(0.6, 0.8), u(0.8, 0.95)),
        ground_color=(u(0.3, 0.5), u(0.3, 0.5), u(0.3, 0.45)),
        pedestrians=pedestrians,
        vehicles=vehicles,
        water=water,
    )


def _grid(size: int) -> Tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    return yy + 0.5, xx + 0.5


def _ellipse(yy, xx, cx, cy, rx, ry) -> np.ndarray:
    return ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0


def _rect(yy, xx, x0, y0, w, h) -> np.ndarray:
    return (xx >= x0) & (xx < x0 + w) & (yy >= y0) & (yy < y0 + h)


def render(layout: SceneLayout, size: int, night_compression: float = 0.35) -> Tuple[np.ndarray, np.ndarray]:
    """
    Render one scene.

    Returns:
        (rgb [3, H, W], thermal [H, W]) both in [0, 1] and snapped to the 8-bit grid
    """
    yy, xx = _grid(size)
    v, w = yy / size * 2 - 1, xx / size * 2 - 1

    # Background: thermal gradient plus a gentle ripple; RGB tracks the same field
    field = math.cos(layout.angle) * w + math.sin(layout.angle) * v
    field = field + 0.5 * np.sin(3.0 * field + layout.angle)
    thermal = np.clip(layout.base_heat + layout.contrast * field, 0.0, BACKGROUND_MAX)
    shade = 0.75 + 0.25 * (thermal / BACKGROUND_MAX)
    sky = (yy / size) < layout.horizon
    rgb = np.where(
        sky[None],
        np.asarray(layout.sky_color)[:, None, None] * np.ones_like(thermal),
        np.asarray(layout.ground_color)[:, None, None] * shade,
    )

    mode = "night" if layout.night else "day"
    for body in layout.water:
        m = _ellipse(yy, xx, body.cx, body.cy, body.rx, body.ry)
        thermal[m] = WATER_HEAT[mode]
        rgb[:, m] = np.asarray(WATER_COLOR)[:, None]

    for car in layout.vehicles:
        m = _rect(yy, xx, car.x0, car.y0, car.width, car.height)
        thermal[m] = VEHICLE_BODY_HEAT
        rgb[:, m] = np.asarray(car.color)[:, None]
        tire_y = car.y0 + car.height - car.tire_height
        for lo, hi in ((0.1, 0.35), (0.65, 0.9)):
            t = _rect(yy, xx, car.x0 + lo * car.width, tire_y, (hi - lo) * car.width, car.tire_height)
            thermal[t] = TIRE_HEAT
            rgb[:, t] = np.asarray(TIRE_COLOR)[:, None]

    for person in layout.pedestrians:
        m = _ellipse(yy, xx, person.cx, person.cy, person.rx, person.ry)
        thermal[m] = PEDESTRIAN_HEAT
        rgb[:, m] = np.asarray(person.color)[:, None]

    if layout.night:
        thermal = NIGHT_CENTER + (thermal - NIGHT_CENTER) * night_compression
        rgb = rgb * NIGHT_RGB_GAIN

    rgb8 = np.rint(np.clip(rgb, 0, 1) * 255.0)
    thermal8 = np.rint(np.clip(thermal, 0, 1) * 255.0)
    return rgb8 / 255.0, thermal8 / 255.0


def _to_pair(layout: SceneLayout, spec: SynthSceneSpec, target_channels: int) -> ImagePair:
    rgb, thermal = render(layout, spec.image_size, spec.night_compression)
    source = torch.from_numpy(normalize(rgb, 1.0))
    target = torch.from_numpy(normalize(np.repeat(thermal[None], target_channels, axis=0), 1.0))
    return ImagePair(source=source, target=target, tag=layout.tag, id=f"synth_{layout.index:06d}")


def source_key(source: Tensor) -> str:
    """Hash of a source image on the 8-bit grid."""
    pixels = np.rint(((source.detach().cpu().to(torch.float64).numpy() + 1.0) * 0.5).clip(0, 1) * 255.0)
    return hashlib.sha1(pixels.astype(np.uint8).tobytes()).hexdigest()


class SynthOracle:
    """
    Exact RGB -> thermal mapping for sources produced by the generator.

    Sources are matched by the hash of their 8-bit pixels, so images read back
    from disk resolve as well as in-memory ones.
    """

    def __init__(self, spec: SynthSceneSpec, layouts: List[SceneLayout], target_channels: int = 1):
        self.spec = spec
        self.layouts = {f"synth_{l.index:06d}": l for l in layouts}
        self.target_channels = target_channels
        self._by_key: Dict[str, str] = {}
        for pair_id, layout in self.layouts.items():
            rgb, _ = render(layout, spec.image_size, spec.night_compression)
            self._by_key[source_key(torch.from_numpy(normalize(rgb, 1.0)))] = pair_id

    def __call__(self, source: Tensor) -> Tensor:
        pair_id = self._by_key.get(source_key(source))
        if pair_id is None:
            raise DataError("source image was not produced by this generator")
        return self.target_for(pair_id)

    def target_for(self, pair_id: str) -> Tensor:
        layout = self.layouts.get(pair_id)
        if layout is None:
            raise DataError(f"unknown synthetic id {pair_id}")
        return _to_pair(layout, self.spec, self.target_channels).target

    def __len__(self) -> int:
        return len(self.layouts)

    def to_json(self) -> str:
        payload = OracleFile(spec=self.spec, target_channels=self.target_channels, layouts=list(self.layouts.values()))
        return payload.model_dump_json(indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SynthOracle":
        payload = OracleFile.model_validate_json(text)
        return cls(payload.spec, payload.layouts, payload.target_channels)


class OracleFile(BaseModel):
    """oracle.json: generator spec plus every scene layout"""
    spec: SynthSceneSpec
    target_channels: int = 1
    layouts: List[SceneLayout]


def synth_generate(
    spec: SynthSceneSpec,
    n: int,
    offset: int = 0,
    target_channels: int = 1,
) -> Tuple[List[ImagePair], SynthOracle]:
    """
    Generate n scenes (indices offset .. offset + n - 1).

    Args:
        spec: scene parameters and seed
        n: number of scenes (>= 1)
        offset: first scene index; disjoint offsets give disjoint splits
        target_channels: thermal channels (the map is replicated)

    Returns:
        (pairs, oracle)
    """
    if n < 1:
        raise DataError(f"need at least one scene, got n={n}")
    _check_spec(spec)
    layouts = [sample_layout(spec, offset + i) for i in range(n)]
    pairs = [_to_pair(l, spec, target_channels) for l in layouts]
    logger.info(f"Generated {n} synthetic {spec.mode} scenes at {spec.image_size}px (seed {spec.seed})")
    return pairs, SynthOracle(spec, layouts, target_channels)


def split_generate(
    spec: SynthSceneSpec,
    n: int,
    target_channels: int = 1,
) -> Dict[str, Tuple[List[ImagePair], SynthOracle]]:
    """Train/test partition of n scenes by spec.test_fraction."""
    n_test = int(round(n * spec.test_fraction))
    n_train = n - n_test
    out = {"train": synth_generate(spec, n_train, 0, target_channels)} if n_train else {}
    if n_test:
        out["test"] = synth_generate(spec, n_test, n_train, target_channels)
    return out
