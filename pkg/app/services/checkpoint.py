"""
Single-file checkpoints.

Layout (all integers little-endian):

    magic       8 bytes  b"THRMDIFF"
    version     u32
    header_len  u64
    header      JSON CheckpointManifest
    count       u32
    count x:    name_len u32 | name utf-8 | ndim u32 | dims u64 * ndim | float32 data

Array names are prefixed "raw/" (optimized weights) or "ema/" (averaged weights).
"""
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Dict, Optional

import numpy as np
import torch
from pydantic import ValidationError

from app.core.errors import ConfigError, DataError
from app.diffusion.schedule import NoiseSchedule, schedule_from_config
from app.models.unet import UNet
from app.schemas.manifests import CheckpointManifest

logger = logging.getLogger(__name__)

MAGIC = b"THRMDIFF"
VERSION = 1


@dataclass
class Checkpoint:
    manifest: CheckpointManifest
    raw: Dict[str, np.ndarray]
    ema: Dict[str, np.ndarray]
    path: Optional[str] = field(default=None, compare=False)

    @property
    def schedule(self) -> NoiseSchedule:
        return schedule_from_config(self.manifest.schedule)

    def weights(self, use_ema: bool = True) -> Dict[str, np.ndarray]:
        return self.ema if use_ema else self.raw

    def model(self, use_ema: bool = True) -> UNet:
        """Rebuild the U-Net and load either weight set."""
        model = UNet(self.manifest.model)
        load_weights(model, self.weights(use_ema))
        return model.eval()


def state_arrays(model: torch.nn.Module) -> Dict[str, np.ndarray]:
    return {name: p.detach().cpu().to(torch.float32).numpy().copy() for name, p in model.named_parameters()}


@torch.no_grad()
def load_weights(model: torch.nn.Module, weights: Dict[str, np.ndarray]) -> None:
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(weights))
    unexpected = sorted(set(weights) - set(params))
    if missing or unexpected:
        raise ConfigError(f"weight names do not match the architecture: missing {missing[:3]}, unexpected {unexpected[:3]}")
    for name, p in params.items():
        w = weights[name]
        if tuple(w.shape) != tuple(p.shape):
            raise ConfigError(f"{name}: checkpoint shape {tuple(w.shape)} vs model {tuple(p.shape)}")
        p.copy_(torch.from_numpy(np.ascontiguousarray(w)).to(p.dtype))


def _write_array(f: BinaryIO, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    f.write(struct.pack("<I", len(encoded)))
    f.write(encoded)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(f: BinaryIO, n: int, path: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise DataError(f"{path}: truncated checkpoint")
    return data


def _read_array(f: BinaryIO, path: str):
    (name_len,) = struct.unpack("<I", _read_exact(f, 4, path))
    name = _read_exact(f, name_len, path).decode("utf-8")
    (ndim,) = struct.unpack("<I", _read_exact(f, 4, path))
    dims = struct.unpack(f"<{ndim}Q", _read_exact(f, 8 * ndim, path)) if ndim else ()
    count = int(np.prod(dims)) if dims else 1
    arr = np.frombuffer(_read_exact(f, 4 * count, path), dtype="<f4").reshape(dims)
    return name, arr.astype(np.float32)


def save_checkpoint(ckpt: Checkpoint, path: str) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = ckpt.manifest.model_dump_json().encode("utf-8")
    arrays = [(f"raw/{k}", v) for k, v in sorted(ckpt.raw.items())]
    arrays += [(f"ema/{k}", v) for k, v in sorted(ckpt.ema.items())]
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(header)))
        f.write(header)
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays:
            _write_array(f, name, arr)
    tmp.replace(path)
    logger.info(f"💾 Saved checkpoint step {ckpt.manifest.step} to {path}")
    ckpt.path = str(path)
    return str(path)


def load_checkpoint(path: str) -> Checkpoint:
    path = str(path)
    try:
        f = open(path, "rb")
    except FileNotFoundError as e:
        raise DataError(f"missing checkpoint: {path}") from e
    with f:
        if _read_exact(f, len(MAGIC), path) != MAGIC:
            raise DataError(f"{path} is not a checkpoint file")
        version, header_len = struct.unpack("<IQ", _read_exact(f, 12, path))
        if version > VERSION:
            raise DataError(f"{path}: checkpoint version {version} is newer than supported {VERSION}")
        try:
            manifest = CheckpointManifest.model_validate_json(_read_exact(f, header_len, path))
        except ValidationError as e:
            raise DataError(f"{path}: invalid checkpoint header: {e}") from e
        (count,) = struct.unpack("<I", _read_exact(f, 4, path))
        raw, ema = {}, {}
        for _ in range(count):
            name, arr = _read_array(f, path)
            prefix, _, key = name.partition("/")
            {"raw": raw, "ema": ema}.get(prefix, {})[key] = arr
    return Checkpoint(manifest=manifest, raw=raw, ema=ema, path=path)
