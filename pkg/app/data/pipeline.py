"""
Paired RGB/thermal ingestion: directory scanning, decoding, normalization,
augmentation and batching.

Images live in [-1, 1]: 8-bit value 0 maps to -1.0 and 255 to 1.0.
"""
import csv
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from app.core.config import settings
from app.core.errors import DataError, ShapeError
from app.diffusion.rng import Rng
from app.schemas.manifests import DatasetManifest, ManifestEntry

logger = logging.getLogger(__name__)

Tensor = torch.Tensor

SPLITS = ("train", "val", "test")
SIXTEEN_BIT_MODES = ("I;16", "I;16B", "I;16L", "I")
CLIP_PERCENTILES = (1.0, 99.0)


@dataclass
class ImagePair:
    source: Tensor          # [3, H, W]
    target: Tensor          # [Ct, H, W]
    tag: str = "untagged"
    id: str = ""

    def __post_init__(self):
        if self.source.ndim != 3 or self.target.ndim != 3:
            raise ShapeError(f"pair {self.id}: expected CHW tensors, got {tuple(self.source.shape)} and {tuple(self.target.shape)}")
        if self.source.shape[1:] != self.target.shape[1:]:
            raise ShapeError(
                f"pair {self.id}: source {tuple(self.source.shape)} and target {tuple(self.target.shape)} not aligned"
            )
        for name, t in (("source", self.source), ("target", self.target)):
            if t.numel() and float(t.abs().max()) > 1.0 + 1e-6:
                raise DataError(f"pair {self.id}: {name} values outside [-1, 1]")
        if self.tag not in ("day", "night", "untagged"):
            raise DataError(f"pair {self.id}: unknown tag {self.tag!r}")


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def normalize(pixels: np.ndarray, max_value: float = 255.0) -> np.ndarray:
    """Map [0, max_value] to [-1, 1] in float32."""
    return (pixels.astype(np.float64) / max_value * 2.0 - 1.0).astype(np.float32)


def denormalize(x: Tensor) -> Tensor:
    """Map [-1, 1] to [0, 1]."""
    return ((x + 1.0) * 0.5).clamp(0.0, 1.0)


def to_uint8(x: Tensor) -> np.ndarray:
    """CHW tensor in [-1, 1] to an HWC (or HW) uint8 array."""
    arr = np.rint(denormalize(x.detach().cpu().to(torch.float64)).numpy() * 255.0).astype(np.uint8)
    arr = np.transpose(arr, (1, 2, 0))
    return arr[..., 0] if arr.shape[-1] == 1 else arr


def quantize(x: Tensor) -> Tensor:
    """Snap values in [-1, 1] onto the 8-bit grid."""
    arr = to_uint8(x)
    if arr.ndim == 2:
        arr = arr[..., None]
    return torch.from_numpy(normalize(np.transpose(arr, (2, 0, 1))))


# ---------------------------------------------------------------------------
# Scanning
# ---------------------------------------------------------------------------

def read_tags(path: Path) -> dict:
    """tags.csv with header id,tag."""
    tags = {}
    if not path.exists():
        return tags
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not {"id", "tag"} <= set(reader.fieldnames):
            raise DataError(f"{path}: expected header 'id,tag'")
        for row in reader:
            tag = row["tag"].strip().lower()
            if tag not in ("day", "night"):
                raise DataError(f"{path}: unknown tag {row['tag']!r} for id {row['id']}")
            tags[row["id"].strip()] = tag
    return tags


def _open(path: Path) -> Image.Image:
    try:
        img = Image.open(path)
        img.load()
        return img
    except FileNotFoundError as e:
        raise DataError(f"missing file: {path}") from e
    except (UnidentifiedImageError, OSError) as e:
        raise DataError(f"cannot decode {path}: {e}") from e


def _thermal_clip(paths: Sequence[Path]) -> Optional[List[float]]:
    """Global 1%/99% clip over every 16-bit thermal file; None when all are 8-bit."""
    samples = []
    for p in paths:
        img = _open(p)
        if img.mode in SIXTEEN_BIT_MODES:
            samples.append(np.asarray(img, dtype=np.float64).ravel())
    if not samples:
        return None
    lo, hi = np.percentile(np.concatenate(samples), CLIP_PERCENTILES)
    if hi <= lo:
        hi = lo + 1.0
    return [float(lo), float(hi)]


def scan_directory(root: str, split: str = "train") -> DatasetManifest:
    """
    Build a manifest from root/{split}/{rgb,thermal}/<id>.png.

    Args:
        root: dataset root
        split: train, val or test

    Returns:
        DatasetManifest sorted by id, tagged from tags.csv when present
    """
    if split not in SPLITS:
        raise DataError(f"Unknown split: {split}")
    base = Path(root) / split
    rgb_dir, thermal_dir = base / "rgb", base / "thermal"
    if not rgb_dir.is_dir() or not thermal_dir.is_dir():
        raise DataError(f"{base} does not contain rgb/ and thermal/ directories")

    tags = read_tags(base / "tags.csv") or read_tags(Path(root) / "tags.csv")
    entries = []
    for rgb_path in sorted(rgb_dir.glob("*.png")):
        pair_id = rgb_path.stem
        thermal_path = thermal_dir / rgb_path.name
        if not thermal_path.exists():
            raise DataError(f"missing thermal file for id {pair_id}: {thermal_path}")
        entries.append(ManifestEntry(
            id=pair_id,
            source_path=str(rgb_path.relative_to(root)),
            target_path=str(thermal_path.relative_to(root)),
            tag=tags.get(pair_id, "untagged"),
        ))

    clip = _thermal_clip([Path(root) / e.target_path for e in entries])
    logger.info(f"Scanned {len(entries)} pairs under {base}" + (f" (16-bit clip {clip})" if clip else ""))
    return DatasetManifest(root=str(root), split=split, entries=entries, thermal_clip=clip)


def read_manifest(path: str) -> DatasetManifest:
    try:
        return DatasetManifest.model_validate_json(Path(path).read_text())
    except FileNotFoundError as e:
        raise DataError(f"missing manifest: {path}") from e
    except ValueError as e:
        raise DataError(f"invalid manifest {path}: {e}") from e


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

def _resize(img: Image.Image, image_size: Optional[int]) -> Image.Image:
    if image_size is None or img.size == (image_size, image_size):
        return img
    return img.resize((image_size, image_size), Image.Resampling.BILINEAR)


def _decode_source(path: Path, image_size: Optional[int]) -> np.ndarray:
    img = _resize(_open(path).convert("RGB"), image_size)
    return normalize(np.transpose(np.asarray(img), (2, 0, 1)))


def _decode_target(
    path: Path,
    image_size: Optional[int],
    target_channels: int,
    clip: Optional[List[float]],
) -> np.ndarray:
    img = _open(path)
    if img.mode in SIXTEEN_BIT_MODES:
        raw = np.asarray(img, dtype=np.float64)
        lo, hi = clip if clip is not None else (float(raw.min()), float(raw.max()) or 1.0)
        scaled = (np.clip(raw, lo, hi) - lo) / max(hi - lo, 1e-12)
        resized = np.asarray(_resize(Image.fromarray(scaled.astype(np.float32)), image_size))
        single = np.clip(resized, 0.0, 1.0) * 2.0 - 1.0
        arr = single[None].astype(np.float32)
    else:
        mode = "RGB" if target_channels == 3 else "L"
        arr = np.asarray(_resize(img.convert(mode), image_size))
        arr = normalize(arr[None] if arr.ndim == 2 else np.transpose(arr, (2, 0, 1)))
    if arr.shape[0] != target_channels:
        if arr.shape[0] != 1:
            raise DataError(f"{path}: {arr.shape[0]} thermal channels, expected {target_channels}")
        arr = np.repeat(arr, target_channels, axis=0)
    return arr


def _load_entry(
    manifest: DatasetManifest,
    entry: ManifestEntry,
    image_size: Optional[int],
    target_channels: int,
) -> ImagePair:
    root = Path(manifest.root)
    source = _decode_source(root / entry.source_path, image_size)
    target = _decode_target(root / entry.target_path, image_size, target_channels, manifest.thermal_clip)
    if source.shape[1:] != target.shape[1:]:
        raise DataError(f"pair {entry.id}: sizes {source.shape[1:]} and {target.shape[1:]} differ after resize")
    return ImagePair(torch.from_numpy(source), torch.from_numpy(target), entry.tag, entry.id)


def load_dataset(
    manifest: DatasetManifest,
    image_size: Optional[int] = 64,
    target_channels: int = 1,
    workers: Optional[int] = None,
) -> List[ImagePair]:
    """
    Decode every pair of a manifest, ordered by id.

    Decoding fans out over a thread pool; the returned order never depends
    on worker scheduling.
    """
    entries = sorted(manifest.entries, key=lambda e: e.id)
    ids = [e.id for e in entries]
    if len(set(ids)) != len(ids):
        raise DataError(f"manifest {manifest.root}/{manifest.split} has duplicate ids")
    if not entries:
        return []
    workers = workers or max(1, settings.DECODE_WORKERS)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pairs = list(pool.map(lambda e: _load_entry(manifest, e, image_size, target_channels), entries))
    logger.info(f"Loaded {len(pairs)} pairs from {manifest.root}/{manifest.split}")
    return pairs


# ---------------------------------------------------------------------------
# Augmentation and batching
# ---------------------------------------------------------------------------

def augment(pair: ImagePair, rng: Rng, force: Optional[bool] = None) -> ImagePair:
    """Horizontal flip with probability 0.5, applied to source and target together."""
    flip = force if force is not None else rng.random() < 0.5
    if not flip:
        return pair
    return replace(pair, source=torch.flip(pair.source, dims=[-1]), target=torch.flip(pair.target, dims=[-1]))


class Batch(NamedTuple):
    x: Tensor               # [N, 3, H, W]
    y0: Tensor              # [N, Ct, H, W]
    tags: List[str]
    ids: List[str]


def stack(pairs: Sequence[ImagePair]) -> Batch:
    return Batch(
        x=torch.stack([p.source for p in pairs]),
        y0=torch.stack([p.target for p in pairs]),
        tags=[p.tag for p in pairs],
        ids=[p.id for p in pairs],
    )


def batches(
    pairs: Sequence[ImagePair],
    batch_size: int,
    shuffle_seed: Optional[int] = None,
    epoch: int = 0,
) -> Iterator[Batch]:
    """
    One epoch of batches; the final partial batch is kept.

    Args:
        pairs: dataset
        batch_size: rows per batch (>= 1)
        shuffle_seed: None keeps dataset order
        epoch: selects the permutation for this epoch

    Yields:
        Batch(x, y0, tags, ids)
    """
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    if not pairs:
        raise DataError("cannot batch an empty dataset")
    order = np.arange(len(pairs))
    if shuffle_seed is not None:
        order = Rng(shuffle_seed).split("epoch", epoch).permutation(len(pairs))
    for start in range(0, len(pairs), batch_size):
        yield stack([pairs[i] for i in order[start:start + batch_size]])


def split_by_tag(pairs: Sequence[ImagePair]) -> Tuple[List[ImagePair], List[ImagePair]]:
    """(day pairs, night pairs)."""
    return [p for p in pairs if p.tag == "day"], [p for p in pairs if p.tag == "night"]
